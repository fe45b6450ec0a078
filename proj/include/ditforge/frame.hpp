#pragma once

#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "ditforge/error.hpp"

namespace ditforge {

enum class Dtype : std::uint8_t {
  kUint8 = 0,
  kInt32 = 1,
  kInt64 = 2,
  kFloat16 = 3,
  kBfloat16 = 4,
  kFloat32 = 5,
};

inline std::size_t element_size(Dtype d) {
  switch (d) {
    case Dtype::kUint8: return 1;
    case Dtype::kInt32: return 4;
    case Dtype::kInt64: return 8;
    case Dtype::kFloat16: return 2;
    case Dtype::kBfloat16: return 2;
    case Dtype::kFloat32: return 4;
  }
  throw FrameCorruptError("unknown dtype " + std::to_string(static_cast<int>(d)));
}

inline const char* to_string(Dtype d) {
  switch (d) {
    case Dtype::kUint8: return "uint8";
    case Dtype::kInt32: return "int32";
    case Dtype::kInt64: return "int64";
    case Dtype::kFloat16: return "float16";
    case Dtype::kBfloat16: return "bfloat16";
    case Dtype::kFloat32: return "float32";
  }
  return "?";
}

// Wire unit of the data plane: raw tensor bytes plus a minimal header.
struct Frame {
  std::uint64_t seq_no = 0;
  std::string name;
  Dtype dtype = Dtype::kUint8;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> payload;
  std::int64_t sent_at_ns = 0;  // monotonic nanos, not serialized

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  bool operator==(const Frame& o) const {
    return seq_no == o.seq_no && name == o.name && dtype == o.dtype && shape == o.shape &&
           payload == o.payload;
  }
};

constexpr std::uint8_t kFrameMagic[4] = {0x53, 0x50, 0x52, 0x43};  // "SPRC"
constexpr std::uint8_t kFrameVersion = 1;
constexpr std::size_t kMaxFrameNameLen = 255;
constexpr std::uint8_t kMaxFrameNdim = 64;

namespace detail {

template <typename T>
inline void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
inline T get_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace detail

// Layout, little-endian: magic "SPRC", version u8, flags u8, name_len u16,
// name bytes, seq_no u64, dtype u8, ndim u8, ndim x u64 dims,
// payload_len u64, payload bytes.
inline std::vector<std::uint8_t> encode_frame(const Frame& f) {
  if (f.name.empty() || f.name.size() > kMaxFrameNameLen)
    throw FrameCorruptError("frame name must be 1..255 bytes");
  if (f.shape.size() > kMaxFrameNdim)
    throw FrameCorruptError("frame ndim exceeds " + std::to_string(kMaxFrameNdim));
  if (f.payload.size() != element_size(f.dtype) * f.element_count())
    throw FrameCorruptError("payload length does not match dtype * shape");

  std::vector<std::uint8_t> out;
  out.reserve(26 + f.name.size() + 8 * f.shape.size() + f.payload.size());
  out.insert(out.end(), kFrameMagic, kFrameMagic + 4);
  out.push_back(kFrameVersion);
  out.push_back(0);  // flags
  detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(f.name.size()));
  out.insert(out.end(), f.name.begin(), f.name.end());
  detail::put_le<std::uint64_t>(out, f.seq_no);
  out.push_back(static_cast<std::uint8_t>(f.dtype));
  out.push_back(static_cast<std::uint8_t>(f.shape.size()));
  for (auto d : f.shape) detail::put_le<std::uint64_t>(out, d);
  detail::put_le<std::uint64_t>(out, f.payload.size());
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

struct DecodeResult {
  Frame frame;
  std::size_t consumed = 0;
};

// Decodes one frame from the front of [data, data+len). Throws
// FrameCorruptError on malformed input; returns nullopt when more bytes are
// needed for a (so far) well-formed prefix.
inline std::optional<DecodeResult> decode_frame_prefix(const std::uint8_t* data, std::size_t len) {
  if (len < 4) return std::nullopt;
  if (std::memcmp(data, kFrameMagic, 4) != 0) throw FrameCorruptError("bad magic");
  if (len < 8) return std::nullopt;
  if (data[4] != kFrameVersion)
    throw FrameCorruptError("unsupported version " + std::to_string(data[4]));
  const std::uint16_t name_len = detail::get_le<std::uint16_t>(data + 6);
  if (name_len == 0 || name_len > kMaxFrameNameLen) throw FrameCorruptError("bad name length");
  std::size_t off = 8;
  if (len < off + name_len + 10) return std::nullopt;
  Frame f;
  f.name.assign(reinterpret_cast<const char*>(data + off), name_len);
  off += name_len;
  f.seq_no = detail::get_le<std::uint64_t>(data + off);
  off += 8;
  const std::uint8_t dtype_raw = data[off++];
  if (dtype_raw > static_cast<std::uint8_t>(Dtype::kFloat32))
    throw FrameCorruptError("bad dtype " + std::to_string(dtype_raw));
  f.dtype = static_cast<Dtype>(dtype_raw);
  const std::uint8_t ndim = data[off++];
  if (ndim > kMaxFrameNdim) throw FrameCorruptError("bad ndim");
  if (len < off + 8 * static_cast<std::size_t>(ndim) + 8) return std::nullopt;
  f.shape.resize(ndim);
  for (std::uint8_t i = 0; i < ndim; ++i) {
    f.shape[i] = detail::get_le<std::uint64_t>(data + off);
    off += 8;
  }
  const std::uint64_t payload_len = detail::get_le<std::uint64_t>(data + off);
  off += 8;
  if (payload_len != element_size(f.dtype) * f.element_count())
    throw FrameCorruptError("payload length mismatch");
  if (len < off + payload_len) return std::nullopt;
  f.payload.assign(data + off, data + off + payload_len);
  off += payload_len;
  return DecodeResult{std::move(f), off};
}

inline Frame decode_frame(const std::vector<std::uint8_t>& bytes) {
  auto r = decode_frame_prefix(bytes.data(), bytes.size());
  if (!r) throw FrameCorruptError("truncated frame");
  if (r->consumed != bytes.size()) throw FrameCorruptError("trailing bytes after frame");
  return std::move(r->frame);
}

// Incremental decoder for a byte stream; on corruption it resynchronizes at
// the next magic occurrence and counts the event.
class FrameStreamReader {
 public:
  void feed(const std::uint8_t* data, std::size_t len) {
    buf_.insert(buf_.end(), data, data + len);
  }
  void feed(const std::vector<std::uint8_t>& bytes) { feed(bytes.data(), bytes.size()); }

  std::optional<Frame> next() {
    while (!buf_.empty()) {
      try {
        auto r = decode_frame_prefix(buf_.data(), buf_.size());
        if (!r) return std::nullopt;  // need more bytes
        buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(r->consumed));
        return std::move(r->frame);
      } catch (const FrameCorruptError&) {
        ++corrupt_events_;
        resync();
      }
    }
    return std::nullopt;
  }

  std::size_t corrupt_events() const { return corrupt_events_; }
  std::size_t buffered() const { return buf_.size(); }

 private:
  void resync() {
    // skip the bad magic byte, then scan for the next magic
    std::size_t pos = 1;
    while (pos + 4 <= buf_.size() && std::memcmp(buf_.data() + pos, kFrameMagic, 4) != 0) ++pos;
    if (pos + 4 > buf_.size()) pos = buf_.size() >= 3 ? buf_.size() - 3 : buf_.size();
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos));
  }

  std::vector<std::uint8_t> buf_;
  std::size_t corrupt_events_ = 0;
};

}  // namespace ditforge
