// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "matq/common.hpp"
#include "matq/grid.hpp"
#include "matq/nestpack.hpp"
#include "matq/slice.hpp"

namespace matq {

// Binary checkpoint format (little-endian), see docs/format.md.
//
//   magic "MQPT" | version u16 | kind u8 | master_bits u8
//   n_targets u32 | targets u8[n] | lambdas f64[n]
//   group_size u32 | damp_rel f64 | model_tag str | calib_tag str
//   layer_count u32 | layer records...
//
//   str    = len u32 | bytes
//   record = name str | bits u8 | source_bits u8 | d_row u32 | d_col u32
//            | n_scales u32 | scales f32[n_scales]
//            | encoding u8 (0 raw bytes, 1 bit planes) | payload_len u64 | payload

inline constexpr std::array<char, 4> kMagic{'M', 'Q', 'P', 'T'};
inline constexpr std::uint16_t kFormatVersion = 1;

enum class FileKind : std::uint8_t { parent = 0, sliced = 1 };
enum class Encoding : std::uint8_t { raw = 0, bitplane = 1 };

struct CheckpointHeader {
  BitWidthSet bits;
  std::size_t group_size = 128;
  double damp_rel = 0.01;
  std::string model_tag;
  std::string calib_tag;

  int master_bits() const noexcept { return bits.master(); }
  friend bool operator==(const CheckpointHeader&, const CheckpointHeader&) = default;
};

/// Parent model: every layer at the master bit-width.
struct Checkpoint {
  CheckpointHeader header;
  std::vector<NestedLayer> layers;

  const NestedLayer& layer(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return l;
    throw Error("no layer named " + name);
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Child model sliced from a parent; layers may carry different bit-widths.
struct SlicedModel {
  CheckpointHeader header;
  std::vector<SlicedLayer> layers;

  friend bool operator==(const SlicedModel&, const SlicedModel&) = default;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put_le(v); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(checked_u32(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

  static std::uint32_t checked_u32(std::size_t n) {
    if (n > 0xFFFFFFFFu) throw Error("checkpoint: field too large");
    return static_cast<std::uint32_t>(n);
  }

 private:
  template <typename T>
  void put_le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return get_le<std::uint8_t>(); }
  std::uint16_t u16() { return get_le<std::uint16_t>(); }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw Error("corrupt checkpoint: truncated");
  }
  template <typename T>
  T get_le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

inline void write_header(ByteWriter& out, FileKind kind, const CheckpointHeader& h, std::size_t layer_count) {
  out.raw(kMagic.data(), kMagic.size());
  out.u16(kFormatVersion);
  out.u8(static_cast<std::uint8_t>(kind));
  out.u8(static_cast<std::uint8_t>(h.master_bits()));
  out.u32(ByteWriter::checked_u32(h.bits.size()));
  for (int r : h.bits.targets()) out.u8(static_cast<std::uint8_t>(r));
  for (double l : h.bits.lambdas()) out.f64(l);
  out.u32(ByteWriter::checked_u32(h.group_size));
  out.f64(h.damp_rel);
  out.str(h.model_tag);
  out.str(h.calib_tag);
  out.u32(ByteWriter::checked_u32(layer_count));
}

inline void write_codes(ByteWriter& out, const CodeMatrix& codes, int bits) {
  if (bits <= 4) {
    const PackedTensor p = pack(codes, bits);
    out.u8(static_cast<std::uint8_t>(Encoding::bitplane));
    out.u64(p.payload_bytes());
    for (auto w : p.base) out.u64(w);
    for (auto w : p.plane_b2) out.u32(w);
    for (auto w : p.plane_b3) out.u32(w);
  } else {
    out.u8(static_cast<std::uint8_t>(Encoding::raw));
    out.u64(codes.size());
    out.raw(codes.data(), codes.size());
  }
}

inline void write_record(ByteWriter& out, const std::string& name, int bits, int source_bits,
                         const CodeMatrix& codes, const Matrix<float>& scales) {
  out.str(name);
  out.u8(static_cast<std::uint8_t>(bits));
  out.u8(static_cast<std::uint8_t>(source_bits));
  out.u32(ByteWriter::checked_u32(codes.rows()));
  out.u32(ByteWriter::checked_u32(codes.cols()));
  out.u32(ByteWriter::checked_u32(scales.size()));
  for (float s : scales.flat()) out.f32(s);
  write_codes(out, codes, bits);
}

struct RawRecord {
  std::string name;
  int bits = 0;
  int source_bits = 0;
  CodeMatrix codes;
  Matrix<float> scales;
};

inline RawRecord read_record(ByteReader& in, std::size_t group_size) {
  RawRecord rec;
  rec.name = in.str();
  rec.bits = in.u8();
  rec.source_bits = in.u8();
  if (rec.bits < kMinBits || rec.bits > kMaxBits || rec.source_bits < rec.bits || rec.source_bits > kMaxBits)
    throw Error("corrupt checkpoint: bad bit-width in layer " + rec.name);
  const std::size_t rows = in.u32();
  const std::size_t cols = in.u32();
  const std::size_t n_scales = in.u32();
  if (group_size == 0 || n_scales != rows * group_count(cols, group_size))
    throw Error("corrupt checkpoint: scale count mismatch in layer " + rec.name);
  rec.scales = Matrix<float>(rows, group_count(cols, group_size));
  for (auto& s : rec.scales.flat()) s = in.f32();
  const auto encoding = in.u8();
  const std::uint64_t payload = in.u64();
  if (encoding == static_cast<std::uint8_t>(Encoding::bitplane)) {
    if (rec.bits > 4) throw Error("corrupt checkpoint: bit planes above 4 bits");
    PackedTensor p = make_packed(rec.bits, rows, cols);
    if (payload != p.payload_bytes()) throw Error("corrupt checkpoint: payload length mismatch");
    for (auto& w : p.base) w = in.u64();
    for (auto& w : p.plane_b2) w = in.u32();
    for (auto& w : p.plane_b3) w = in.u32();
    rec.codes = unpack(p);
    // Pad weights must hold code 0, so the planes re-pack to themselves.
    if (pack(rec.codes, rec.bits) != p) throw Error("corrupt checkpoint: nonzero padding bits");
  } else if (encoding == static_cast<std::uint8_t>(Encoding::raw)) {
    if (payload != rows * cols) throw Error("corrupt checkpoint: payload length mismatch");
    rec.codes = CodeMatrix(rows, cols);
    in.raw(rec.codes.data(), rec.codes.size());
    for (auto q : rec.codes.flat())
      if (q > max_code(rec.bits)) throw Error("corrupt checkpoint: code out of range");
  } else {
    throw Error("corrupt checkpoint: unknown encoding");
  }
  return rec;
}

inline void save_bytes(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path);
}

inline std::vector<std::uint8_t> load_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct ParsedHeader {
  FileKind kind;
  CheckpointHeader header;
  std::size_t layer_count;
};

inline ParsedHeader read_header(ByteReader& in) {
  std::array<char, 4> magic{};
  try {
    in.raw(magic.data(), magic.size());
  } catch (const Error&) {
    throw Error("not a checkpoint");
  }
  if (magic != kMagic) throw Error("not a checkpoint");
  const auto version = in.u16();
  if (version != kFormatVersion) throw Error("unsupported version " + std::to_string(version));
  ParsedHeader ph{};
  const auto kind = in.u8();
  if (kind > 1) throw Error("corrupt checkpoint: unknown file kind");
  ph.kind = static_cast<FileKind>(kind);
  const int master = in.u8();
  const std::uint32_t n = in.u32();
  if (n == 0 || n > 7) throw Error("corrupt checkpoint: bad target count");
  std::vector<int> targets(n);
  std::vector<double> lambdas(n);
  for (auto& t : targets) t = in.u8();
  for (auto& l : lambdas) l = in.f64();
  try {
    ph.header.bits = BitWidthSet::make(targets, lambdas);
  } catch (const Error& e) {
    throw Error(std::string("corrupt checkpoint: ") + e.what());
  }
  if (ph.header.bits.master() != master) throw Error("corrupt checkpoint: master bit-width mismatch");
  ph.header.group_size = in.u32();
  ph.header.damp_rel = in.f64();
  ph.header.model_tag = in.str();
  ph.header.calib_tag = in.str();
  ph.layer_count = in.u32();
  return ph;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  detail::ByteWriter out;
  detail::write_header(out, FileKind::parent, ckpt.header, ckpt.layers.size());
  for (const auto& layer : ckpt.layers) {
    layer.validate();
    if (layer.bits != ckpt.header.bits || layer.grid.group_size != ckpt.header.group_size)
      throw Error("checkpoint: layer " + layer.name + " disagrees with header");
    detail::write_record(out, layer.name, layer.grid.master_bits, layer.grid.master_bits, layer.codes,
                         layer.grid.scales);
  }
  return std::move(out.bytes());
}

inline std::vector<std::uint8_t> serialize(const SlicedModel& model) {
  detail::ByteWriter out;
  detail::write_header(out, FileKind::sliced, model.header, model.layers.size());
  for (const auto& layer : model.layers) {
    if (layer.group_size != model.header.group_size)
      throw Error("sliced model: layer " + layer.name + " disagrees with header");
    detail::write_record(out, layer.name, layer.bits, layer.source_bits, layer.codes, layer.scales);
  }
  return std::move(out.bytes());
}

inline FileKind file_kind(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes);
  return detail::read_header(in).kind;
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes);
  const auto ph = detail::read_header(in);
  if (ph.kind != FileKind::parent) throw Error("not a parent checkpoint (sliced model file)");
  Checkpoint ckpt{ph.header, {}};
  for (std::size_t i = 0; i < ph.layer_count; ++i) {
    auto rec = detail::read_record(in, ph.header.group_size);
    if (rec.bits != ph.header.master_bits() || rec.source_bits != rec.bits)
      throw Error("corrupt checkpoint: layer bit-width differs from master");
    NestedLayer layer{std::move(rec.name), std::move(rec.codes),
                      QuantGrid{rec.bits, ph.header.group_size, std::move(rec.scales)}, ph.header.bits};
    ckpt.layers.push_back(std::move(layer));
  }
  if (!in.at_end()) throw Error("corrupt checkpoint: trailing bytes");
  return ckpt;
}

inline SlicedModel deserialize_sliced(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes);
  const auto ph = detail::read_header(in);
  if (ph.kind != FileKind::sliced) throw Error("not a sliced model file");
  SlicedModel model{ph.header, {}};
  for (std::size_t i = 0; i < ph.layer_count; ++i) {
    auto rec = detail::read_record(in, ph.header.group_size);
    model.layers.push_back(SlicedLayer{std::move(rec.name), rec.bits, rec.source_bits, std::move(rec.codes),
                                       ph.header.group_size, std::move(rec.scales)});
  }
  if (!in.at_end()) throw Error("corrupt checkpoint: trailing bytes");
  return model;
}

inline void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  detail::save_bytes(serialize(ckpt), path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  return deserialize_checkpoint(detail::load_bytes(path));
}

inline void write_sliced(const SlicedModel& model, const std::string& path) {
  detail::save_bytes(serialize(model), path);
}

inline SlicedModel read_sliced(const std::string& path) { return deserialize_sliced(detail::load_bytes(path)); }

inline FileKind read_file_kind(const std::string& path) { return file_kind(detail::load_bytes(path)); }

/// Slice a parent checkpoint into a child model file payload.
inline SlicedModel make_sliced_model(const Checkpoint& ckpt, const BitConfig& config) {
  return {ckpt.header, slice_model(ckpt.layers, config)};
}

}  // namespace matq
