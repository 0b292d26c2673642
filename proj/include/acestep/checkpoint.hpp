#pragma once

// Tensor container: "ACEP", u32 version, u32 count, then per tensor
// u16 name length, name, u8 rank, u32 dims, f32 values (row-major), all
// little-endian, closed by the CRC32 of every preceding byte.

#include "acestep/dcae.hpp"
#include "acestep/params.hpp"
#include "acestep/trainer.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace acestep {

inline constexpr char kContainerMagic[4] = {'A', 'C', 'E', 'P'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct TensorRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  bool operator==(const TensorRecord&) const = default;
};

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t count) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(count)));
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void floats(float* dst, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    require(pos_ + n <= limit_, ErrorKind::kTruncated,
            "container truncated: need " + std::to_string(pos_ + n) + " bytes, have " + std::to_string(limit_));
  }

  const std::string& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const std::vector<TensorRecord>& tensors) {
  std::string out(kContainerMagic, 4);
  detail::put<std::uint32_t>(out, kContainerVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  std::set<std::string> names;
  for (const auto& t : tensors) {
    require(names.insert(t.name).second, ErrorKind::kInvalidArgument, "duplicate tensor name '" + t.name + "'");
    require(t.name.size() <= 0xffff && t.dims.size() <= 0xff, ErrorKind::kInvalidArgument, "tensor header too large");
    require(t.values.size() == t.numel(), ErrorKind::kShapeMismatch, "tensor '" + t.name + "' size does not match dims");
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) detail::put<std::uint32_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
  }
  detail::put<std::uint32_t>(out, crc32_of(out, out.size()));
  return out;
}

// Parses a whole container. Bad magic or version, truncation and CRC failure
// raise distinct error kinds; nothing is returned on failure.
inline std::vector<TensorRecord> decode_container(const std::string& bytes) {
  require(bytes.size() >= 4, ErrorKind::kTruncated, "container truncated: missing magic");
  require(std::memcmp(bytes.data(), kContainerMagic, 4) == 0, ErrorKind::kFormatVersion, "not an ACEP container (bad magic)");
  require(bytes.size() >= 4 + sizeof(std::uint32_t), ErrorKind::kTruncated, "container truncated: missing version");
  const std::size_t body = bytes.size() >= 4 ? bytes.size() - 4 : 0;
  detail::Reader r(bytes, body);
  r.str(4);
  const auto version = r.get<std::uint32_t>();
  require(version == kContainerVersion, ErrorKind::kFormatVersion,
          "unsupported container version " + std::to_string(version) + " (expected " + std::to_string(kContainerVersion) + ")");
  const auto count = r.get<std::uint32_t>();
  std::vector<TensorRecord> out;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    t.name = r.str(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    for (int d = 0; d < rank; ++d) t.dims.push_back(r.get<std::uint32_t>());
    const std::size_t n = t.numel();
    require(n <= body, ErrorKind::kTruncated, "container truncated in tensor '" + t.name + "'");
    t.values.resize(n);
    r.floats(t.values.data(), n);
    require(names.insert(t.name).second, ErrorKind::kCorrupt, "duplicate tensor name '" + t.name + "'");
    out.push_back(std::move(t));
  }
  require(r.pos() == body, ErrorKind::kCorrupt, "container has trailing bytes before the checksum");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  require(stored == crc32_of(bytes, body), ErrorKind::kCorrupt, "container checksum mismatch");
  return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorKind::kIo, "cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), ErrorKind::kIo, "write failed for '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorKind::kIo, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save_container(const std::string& path, const std::vector<TensorRecord>& tensors) {
  write_file(path, encode_container(tensors));
}

inline std::vector<TensorRecord> load_container(const std::string& path) { return decode_container(read_file(path)); }

// ---------------------------------------------------------------------------
// Conversions

template <typename T>
TensorRecord to_record(const std::string& name, const Matrix<T>& m) {
  TensorRecord r{name, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, {}};
  r.values.resize(static_cast<std::size_t>(m.size()));
  for (Index i = 0; i < m.size(); ++i) r.values[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return r;
}

inline TensorRecord text_record(const std::string& name, const std::string& text) {
  TensorRecord r{name, {static_cast<std::uint32_t>(text.size())}, {}};
  for (unsigned char c : text) r.values.push_back(static_cast<float>(c));
  return r;
}

inline std::string record_text(const TensorRecord& r) {
  std::string s;
  for (float v : r.values) s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  return s;
}

inline const TensorRecord* find_record(const std::vector<TensorRecord>& records, const std::string& name) {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

inline const TensorRecord& require_record(const std::vector<TensorRecord>& records, const std::string& name) {
  const TensorRecord* r = find_record(records, name);
  require(r != nullptr, ErrorKind::kShapeMismatch, "checkpoint has no tensor '" + name + "'");
  return *r;
}

// Copies `record` into `dst` after checking that the dims match exactly.
template <typename T>
void assign_checked(Matrix<T>& dst, const TensorRecord& record) {
  const bool ok = record.dims.size() == 2 && record.dims[0] == static_cast<std::uint32_t>(dst.rows()) &&
                  record.dims[1] == static_cast<std::uint32_t>(dst.cols());
  std::string got;
  for (auto d : record.dims) got += (got.empty() ? "" : "x") + std::to_string(d);
  require(ok, ErrorKind::kShapeMismatch,
          "tensor '" + record.name + "' has dims [" + got + "], config expects " + shape_str(dst.rows(), dst.cols()));
  for (Index i = 0; i < dst.size(); ++i) dst.data()[i] = static_cast<T>(record.values[static_cast<std::size_t>(i)]);
}

template <typename T>
void append_params(std::vector<TensorRecord>& out, const ParamStore<T>& params, const std::string& prefix = "") {
  for (const auto& e : params) out.push_back(to_record(prefix + e.name, e.value));
}

// Loads every entry of `params` from the records; validates all shapes before
// modifying anything.
template <typename T>
void load_params(ParamStore<T>& params, const std::vector<TensorRecord>& records, const std::string& prefix = "") {
  ParamStore<T> staged = params;
  for (auto& e : staged) assign_checked(e.value, require_record(records, prefix + e.name));
  for (auto& e : params) e.value = staged.at(e.name);
}

// ---------------------------------------------------------------------------
// Mel files

inline void save_mel(const std::string& path, const MelSpectrogram& mel) {
  TensorRecord meta{"meta", {2}, {static_cast<float>(mel.frame_rate_hz), static_cast<float>(mel.bins())}};
  save_container(path, {to_record("mel", mel.data), meta});
}

inline MelSpectrogram load_mel(const std::string& path) {
  const auto records = load_container(path);
  const TensorRecord& m = require_record(records, "mel");
  const TensorRecord& meta = require_record(records, "meta");
  require(m.dims.size() == 2 && meta.values.size() == 2 && meta.values[1] == static_cast<float>(m.dims[1]),
          ErrorKind::kShapeMismatch, "mel file '" + path + "' has inconsistent metadata");
  MelSpectrogram mel;
  mel.data.resize(m.dims[0], m.dims[1]);
  assign_checked(mel.data, m);
  mel.frame_rate_hz = meta.values[0];
  mel.valid_frames = static_cast<int>(mel.frames());
  return mel;
}

// ---------------------------------------------------------------------------
// Full pipeline checkpoints: autoencoder, denoiser, optional adapter,
// optimizer moments, step counter and the run configuration text.

template <typename T>
std::vector<TensorRecord> pipeline_records(const Dcae<T>& dcae, const TrainState<T>& state, const std::string& config_text) {
  std::vector<TensorRecord> out;
  out.push_back(text_record("meta.config", config_text));
  out.push_back(TensorRecord{"meta.step", {1}, {static_cast<float>(state.step)}});
  out.push_back(TensorRecord{"meta.opt_step", {1}, {static_cast<float>(state.opt.step)}});
  append_params(out, dcae.params);
  append_params(out, state.model.params);
  if (state.lora) append_params(out, state.lora->params);
  std::size_t i = 0;
  for (const auto& e : state.trainable()) {
    out.push_back(to_record("opt.m." + e.name, state.opt.m[i]));
    out.push_back(to_record("opt.v." + e.name, state.opt.v[i]));
    ++i;
  }
  return out;
}

template <typename T>
void save_pipeline(const std::string& path, const Dcae<T>& dcae, const TrainState<T>& state, const std::string& config_text) {
  save_container(path, pipeline_records(dcae, state, config_text));
}

inline std::string embedded_config(const std::vector<TensorRecord>& records) {
  return record_text(require_record(records, "meta.config"));
}

// Restores into objects already built from the embedded configuration.
// Nothing is modified unless every tensor is present with matching dims.
template <typename T>
void restore_pipeline(const std::vector<TensorRecord>& records, Dcae<T>& dcae, TrainState<T>& state) {
  Dcae<T> d = dcae;
  TrainState<T> s = state;
  load_params(d.params, records);
  load_params(s.model.params, records);
  if (s.lora) load_params(s.lora->params, records);
  std::size_t i = 0;
  for (const auto& e : s.trainable()) {
    assign_checked(s.opt.m[i], require_record(records, "opt.m." + e.name));
    assign_checked(s.opt.v[i], require_record(records, "opt.v." + e.name));
    ++i;
  }
  s.step = static_cast<long>(require_record(records, "meta.step").values.at(0));
  s.opt.step = static_cast<long>(require_record(records, "meta.opt_step").values.at(0));
  dcae = std::move(d);
  state = std::move(s);
}

}  // namespace acestep
