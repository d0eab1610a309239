#include <doctest.h>

#include "oracles.hpp"
#include "twinseg/augment.hpp"
#include "twinseg/cohort.hpp"
#include "twinseg/phantom.hpp"
#include "twinseg/preprocess.hpp"

#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

using namespace twinseg;

namespace {

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

// Engine pinned at its maximum: every uniform draw lands at the top of its
// range, so no augmentation is ever taken.
struct MaxEngine {
  using result_type = std::uint64_t;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return max(); }
};

ClientSpec test_client() {
  ClientSpec c;
  c.name = "site";
  c.radius = 6.0;
  c.seed = 77;
  return c;
}

}  // namespace

TEST_CASE("phantom labels follow the nested geometry") {
  const auto spec = test_client();
  for (std::size_t idx = 0; idx < 6; ++idx) {
    const Volume v = generate_phantom(spec, 2, idx, 32, 99);
    const auto g = phantom_geometry(spec, 2, idx, 32, 99);
    REQUIRE(g.present);
    CHECK(v.image.shape() == Shape{4, 32, 32, 32});
    std::size_t tumour = 0;
    for (std::size_t z = 0; z < 32; ++z)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x) {
          const double r = g.rho(double(z), double(y), double(x));
          const auto c = v.label(z, y, x);
          CHECK(c <= 3);
          if (c == enhancing_tumor) CHECK(r <= g.enhancing_fraction);
          if (c >= tumor_core) CHECK(r <= g.core_fraction);
          if (c >= edema) CHECK(r <= 1.0);
          if (r <= 1.0) CHECK(c >= edema);
          if (c != background) {
            ++tumour;
            CHECK((z > 0 && z < 31 && y > 0 && y < 31 && x > 0 && x < 31));
          }
        }
    CHECK(tumour > 0);
    CHECK(0.0 < g.enhancing_fraction);
    CHECK(g.enhancing_fraction < g.core_fraction);
    CHECK(g.core_fraction < 1.0);
  }
}

TEST_CASE("phantom determinism and seed separation") {
  auto spec = test_client();
  spec.radius = 3.0;
  const Volume a = generate_phantom(spec, 1, 3, 16, 5), b = generate_phantom(spec, 1, 3, 16, 5);
  CHECK(same_values(a.image, b.image));
  CHECK(a.label == b.label);
  CHECK_FALSE(same_values(a.image, generate_phantom(spec, 1, 4, 16, 5).image));
  CHECK_FALSE(same_values(a.image, generate_phantom(spec, 2, 3, 16, 5).image));
  CHECK_FALSE(same_values(a.image, generate_phantom(spec, 1, 3, 16, 6).image));
}

TEST_CASE("phantom edge cases") {
  auto spec = test_client();
  spec.radius = 0.0;
  const Volume empty = generate_phantom(spec, 0, 0, 16, 1);
  for (auto c : empty.label.data) CHECK(c == background);
  spec.radius = 20.0;
  CHECK_THROWS_WITH_AS(generate_phantom(spec, 0, 0, 16, 1), doctest::Contains("too large"), std::invalid_argument);
  spec.radius = 3.0;
  spec.prevalence = {0.0, 1.0, 1.0};
  for (auto c : generate_phantom(spec, 0, 0, 16, 1).label.data) CHECK(c == background);
}

TEST_CASE("intensity preprocessing examples") {
  const Tensor r = rescale_intensity(Tensor(Shape{1, 3}, {2.0, 4.0, 6.0}));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.5);
  CHECK(r[2] == 1.0);
  const Tensor z = z_normalize(Tensor(Shape{1, 2}, {1.0, 3.0}));
  CHECK(z[0] == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(z[1] == doctest::Approx(1.0).epsilon(1e-15));
  const Tensor flat = z_normalize(Tensor(Shape{2, 3}, 7.0));
  for (double v : flat.values()) CHECK(v == 0.0);

  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_tensor({2, 50}, rng);
  Tensor y = x.clone();
  for (auto& v : y.mutable_values()) v = 3.5 * v - 12.0;
  const Tensor zx = z_normalize(x), zy = z_normalize(y);
  for (std::size_t i = 0; i < zx.numel(); ++i) CHECK(std::abs(zx[i] - zy[i]) < 1e-12);
  for (std::size_t m = 0; m < 2; ++m) {
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < 50; ++i) {
      s += zx[m * 50 + i];
      ss += zx[m * 50 + i] * zx[m * 50 + i];
    }
    CHECK(std::abs(s / 50) < 1e-12);
    CHECK(std::abs(ss / 50 - 1.0) < 1e-12);
  }
}

TEST_CASE("resize examples") {
  std::mt19937_64 rng(4);
  const Tensor x = oracle::random_tensor({2, 5, 5, 5}, rng);
  CHECK(same_values(resize_image(x, 5), x));
  const Tensor constant = resize_image(Tensor(Shape{1, 4, 4, 4}, 2.5), 7);
  for (double v : constant.values()) CHECK(v == doctest::Approx(2.5));

  // a ramp along width on a 2^3 grid, resampled to 3^3 with corner alignment
  Tensor ramp(Shape{1, 2, 2, 2});
  for (std::size_t i = 0; i < 8; ++i) ramp.data()[i] = static_cast<double>(i % 2);
  const Tensor up = resize_image(ramp, 3);
  const double expect[3] = {0.0, 0.5, 1.0};
  for (std::size_t i = 0; i < 27; ++i) CHECK(up[i] == doctest::Approx(expect[i % 3]).epsilon(1e-15));

  LabelMap l({2, 2, 2});
  for (std::size_t i = 0; i < 8; ++i) l.data[i] = static_cast<std::uint8_t>(i % 4);
  const LabelMap rl = resize_labels(l, 4);
  std::set<std::uint8_t> seen(rl.data.begin(), rl.data.end());
  CHECK(seen == std::set<std::uint8_t>{0, 1, 2, 3});
  CHECK(resize_labels(l, 2) == l);
}

TEST_CASE("preprocess pipeline") {
  auto spec = test_client();
  spec.native_extent = 24;
  const Volume raw = generate_phantom(spec, 0, 0, 32, 8);
  CHECK(raw.image.size(1) == 24);
  const Volume p = preprocess(raw, 32);
  CHECK(p.preprocessed);
  CHECK(p.image.shape() == Shape{4, 32, 32, 32});
  CHECK(p.label.extent == std::array<std::size_t, 3>{32, 32, 32});
  CHECK_THROWS_AS(preprocess(p, 32), std::logic_error);
}

TEST_CASE("augmentation") {
  auto spec = test_client();
  spec.radius = 3.0;
  const Volume v = preprocess(generate_phantom(spec, 0, 1, 16, 3), 16);

  SUBCASE("an engine that never takes a transform is the identity") {
    MaxEngine never;
    AugmentConfig cfg;
    cfg.elastic = true;
    const auto plan = draw_augment_plan(never, cfg);
    CHECK(plan.is_identity());
    const Volume out = augment(v, never, cfg);
    CHECK(same_values(out.image, v.image));
    CHECK(out.label == v.label);
  }
  SUBCASE("flips are paired and involutive") {
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const Volume f = flip(v, axis);
      const Volume ff = flip(f, axis);
      CHECK(same_values(ff.image, v.image));
      CHECK(ff.label == v.label);
      for (std::size_t z = 0; z < 16; ++z)
        for (std::size_t y = 0; y < 16; ++y)
          for (std::size_t x = 0; x < 16; ++x) {
            std::array<std::size_t, 3> s{z, y, x};
            s[axis] = 15 - s[axis];
            CHECK(f.label(z, y, x) == v.label(s[0], s[1], s[2]));
            CHECK(f.image[((2 * 16 + z) * 16 + y) * 16 + x] == v.image[((2 * 16 + s[0]) * 16 + s[1]) * 16 + s[2]]);
          }
    }
  }
  SUBCASE("random augmentation keeps labels valid and values finite") {
    AugmentConfig cfg;
    cfg.probability = 1.0;
    cfg.elastic = true;
    std::mt19937_64 rng(10);
    for (int i = 0; i < 5; ++i) {
      const Volume a = augment(v, rng, cfg);
      CHECK(a.image.shape() == v.image.shape());
      for (auto c : a.label.data) CHECK(c <= 3);
      for (double x : a.image.values()) CHECK(std::isfinite(x));
    }
    std::mt19937_64 r1(11), r2(11);
    CHECK(same_values(augment(v, r1, cfg).image, augment(v, r2, cfg).image));
  }
}

TEST_CASE("cohort counts and splits") {
  std::vector<std::string> notes;
  const auto counts = scaled_counts(1.0 / 25.0, 4, &notes);
  CHECK(counts == std::vector<std::size_t>{50, 40, 7, 4, 4, 50, 15, 10, 4});
  CHECK(notes.size() == 2);

  const auto s = split_sizes(50);
  CHECK((s.train == 34 && s.val == 8 && s.test == 8));
  const auto s4 = split_sizes(4);
  CHECK((s4.train == 2 && s4.val == 1 && s4.test == 1));
  for (std::size_t n = 3; n < 200; ++n) {
    const auto t = split_sizes(n);
    CHECK(t.train + t.val + t.test == n);
    CHECK(t.train >= 1);
  }
  CHECK_THROWS_AS(split_sizes(2), std::invalid_argument);

  auto bad = CohortSpec::sites(16);
  bad.clients[4].sample_count = 2;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("cohort.clients[4].sample_count"), std::invalid_argument);
}

TEST_CASE("partition_noniid") {
  const auto cohort = CohortSpec::sites(16);
  const auto clients = partition_noniid(cohort, 42);
  REQUIRE(clients.size() == 9);
  const std::vector<std::size_t> expected{50, 40, 7, 4, 4, 50, 15, 10, 4};
  std::size_t train_total = 0;
  std::set<std::string> ids;
  for (std::size_t k = 0; k < 9; ++k) {
    const auto& c = clients[k];
    CHECK(c.client_id == k);
    CHECK(c.train.size() + c.val.size() + c.test.size() == expected[k]);
    CHECK(c.n_k() == c.train.size());
    train_total += c.n_k();
    for (const auto* split : {&c.train, &c.val, &c.test})
      for (const auto& v : *split) {
        CHECK(v.preprocessed);
        CHECK(v.image.shape() == Shape{4, 16, 16, 16});
        CHECK(ids.insert(v.subject_id).second);  // disjoint across splits and clients
      }
  }
  CHECK(train_total == 124);
  long double weights = 0;
  for (const auto& c : clients) weights += static_cast<long double>(c.n_k()) / train_total;
  CHECK(std::abs(static_cast<double>(weights) - 1.0) < 1e-15);

  const auto again = partition_noniid(cohort, 42);
  for (std::size_t k = 0; k < 9; ++k) {
    CHECK(again[k].train.front().subject_id == clients[k].train.front().subject_id);
    CHECK(same_values(again[k].val.front().image, clients[k].val.front().image));
  }
  const auto other = partition_noniid(cohort, 43);
  CHECK_FALSE(same_values(other[0].train.front().image, clients[0].train.front().image));

  const auto dir = std::filesystem::temp_directory_path() / "twinseg_cohort_cache_test";
  std::filesystem::remove_all(dir);
  save_cohort_cache(dir, clients, "abc");
  const auto loaded = load_cohort_cache(dir);
  REQUIRE(loaded.size() == 9);
  for (std::size_t k = 0; k < 9; ++k) {
    CHECK(loaded[k].name == clients[k].name);
    REQUIRE(loaded[k].test.size() == clients[k].test.size());
    CHECK(same_values(loaded[k].test.back().image, clients[k].test.back().image));
    CHECK(loaded[k].test.back().label == clients[k].test.back().label);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("strongly non-IID cohort permutes contrast per client") {
  const auto c = CohortSpec::strongly_noniid(16);
  REQUIRE(c.clients.size() == 9);
  std::set<Signature> distinct;
  for (const auto& s : c.clients) distinct.insert(s.signature);
  CHECK(distinct.size() == 9);
  CHECK_NOTHROW(c.validate());
}
