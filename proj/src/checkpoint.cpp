#include "twinseg/checkpoint.hpp"

#include <json.hpp>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace twinseg {

namespace {

constexpr char kMagic[8] = {'T', 'W', 'S', 'G', 'C', 'K', 'P', 'T'};

using Kind = CheckpointError::Kind;

template <class T>
T byte_reverse(T v) {
  if constexpr (sizeof(T) == 4) return __builtin_bswap32(v);
  else return __builtin_bswap64(v);
}

template <class T>
void put_le(std::string& out, T v) {
  if constexpr (std::endian::native == std::endian::big) v = byte_reverse(v);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) v = byte_reverse(v);
  return v;
}

std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

const char* kind_name(EntryKind k) { return k == EntryKind::trainable ? "trainable" : "buffer"; }

}  // namespace

const char* checkpoint_error_name(CheckpointError::Kind kind) {
  switch (kind) {
    case Kind::io: return "io";
    case Kind::bad_magic: return "bad_magic";
    case Kind::version_mismatch: return "version_mismatch";
    case Kind::header_corrupt: return "header_corrupt";
    case Kind::truncated: return "truncated";
    case Kind::layout: return "layout";
    case Kind::checksum: return "checksum";
  }
  return "unknown";
}

std::string encode_checkpoint(const ParameterStore& params, const std::string& config_hash) {
  std::string payload;
  payload.reserve(8 * params.total_numel());
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& [name, entry] : params) {
    const auto n = entry.tensor.numel();
    entries.push_back({{"name", name},
                       {"kind", kind_name(entry.kind)},
                       {"shape", entry.tensor.shape()},
                       {"offset", offset},
                       {"count", n}});
    for (double v : entry.tensor.values()) put_le(payload, std::bit_cast<std::uint64_t>(v));
    offset += n;
  }
  nlohmann::ordered_json header = {{"format_version", kCheckpointVersion},
                                   {"config_hash", config_hash},
                                   {"payload_crc32", crc32_of(payload.data(), payload.size())},
                                   {"entries", std::move(entries)}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  put_le<std::uint32_t>(out, crc32_of(text.data(), text.size()));
  out += text;
  out += payload;
  return out;
}

ParameterStore decode_checkpoint(const std::string& bytes, std::string* config_hash) {
  if (bytes.size() < kCheckpointPreamble) throw CheckpointError(Kind::truncated, "checkpoint: file shorter than preamble");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError(Kind::bad_magic, "checkpoint: bad magic (not a checkpoint container)");
  const auto version = get_le<std::uint32_t>(bytes.data() + 8);
  if (version != kCheckpointVersion)
    throw CheckpointError(Kind::version_mismatch, "checkpoint: format version " + std::to_string(version) +
                                                      ", expected " + std::to_string(kCheckpointVersion));
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 12);
  const auto header_crc = get_le<std::uint32_t>(bytes.data() + 20);
  if (header_len > bytes.size() - kCheckpointPreamble)
    throw CheckpointError(Kind::truncated, "checkpoint: header length " + std::to_string(header_len) +
                                               " exceeds file size");
  const char* text = bytes.data() + kCheckpointPreamble;
  if (crc32_of(text, header_len) != header_crc)
    throw CheckpointError(Kind::checksum, "checkpoint: header checksum mismatch");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text, text + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::header_corrupt, std::string("checkpoint: header is not valid JSON: ") + e.what());
  }

  struct Item {
    std::string name;
    EntryKind kind;
    Shape shape;
    std::size_t offset, count;
  };
  std::vector<Item> items;
  std::uint32_t payload_crc = 0;
  std::string hash;
  try {
    if (header.at("format_version").get<std::uint32_t>() != kCheckpointVersion)
      throw CheckpointError(Kind::version_mismatch, "checkpoint: header format_version disagrees with preamble");
    hash = header.at("config_hash").get<std::string>();
    payload_crc = header.at("payload_crc32").get<std::uint32_t>();
    for (const auto& e : header.at("entries")) {
      Item it;
      it.name = e.at("name").get<std::string>();
      const auto kind = e.at("kind").get<std::string>();
      if (kind != "trainable" && kind != "buffer")
        throw CheckpointError(Kind::header_corrupt, "checkpoint: entry '" + it.name + "' has unknown kind '" + kind + "'");
      it.kind = kind == "trainable" ? EntryKind::trainable : EntryKind::buffer;
      it.shape = e.at("shape").get<Shape>();
      it.offset = e.at("offset").get<std::size_t>();
      it.count = e.at("count").get<std::size_t>();
      items.push_back(std::move(it));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::header_corrupt, std::string("checkpoint: malformed header: ") + e.what());
  }

  std::size_t expected = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (i > 0 && !(items[i - 1].name < it.name))
      throw CheckpointError(Kind::layout, "checkpoint: entries not strictly name-sorted at '" + it.name + "'");
    if (it.shape.empty() || shape_numel(it.shape) != it.count)
      throw CheckpointError(Kind::layout, "checkpoint: entry '" + it.name + "' shape " + shape_string(it.shape) +
                                              " does not match count " + std::to_string(it.count));
    if (it.offset != expected)
      throw CheckpointError(Kind::layout, "checkpoint: entry '" + it.name + "' offset " + std::to_string(it.offset) +
                                              ", expected " + std::to_string(expected));
    expected += it.count;
  }
  const std::size_t payload_start = kCheckpointPreamble + header_len;
  const std::size_t available = bytes.size() - payload_start;
  if (available < 8 * expected)
    throw CheckpointError(Kind::truncated, "checkpoint: payload has " + std::to_string(available) + " bytes, header needs " +
                                               std::to_string(8 * expected));
  if (available > 8 * expected)
    throw CheckpointError(Kind::layout, "checkpoint: " + std::to_string(available - 8 * expected) +
                                            " trailing bytes after payload");
  const char* payload = bytes.data() + payload_start;
  if (crc32_of(payload, available) != payload_crc)
    throw CheckpointError(Kind::checksum, "checkpoint: payload checksum mismatch");

  ParameterStore store;
  for (const auto& it : items) {
    std::vector<double> values(it.count);
    for (std::size_t j = 0; j < it.count; ++j)
      values[j] = std::bit_cast<double>(get_le<std::uint64_t>(payload + 8 * (it.offset + j)));
    store.add(it.name, Tensor(it.shape, std::move(values)), it.kind);
  }
  if (config_hash) *config_hash = hash;
  return store;
}

void save_checkpoint(const ParameterStore& params, const std::filesystem::path& path, const std::string& config_hash) {
  const std::string bytes = encode_checkpoint(params, config_hash);
  auto tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(Kind::io, "checkpoint: cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw CheckpointError(Kind::io, "checkpoint: write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw CheckpointError(Kind::io, "checkpoint: cannot rename into " + path.string());
  }
}

ParameterStore load_checkpoint(const std::filesystem::path& path, std::string* config_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::io, "checkpoint: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return decode_checkpoint(buf.str(), config_hash);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), std::string(e.what()) + " [" + path.string() + "]");
  }
}

}  // namespace twinseg
