#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "pvlseg/model/model.hpp"
#include "pvlseg/train/optim.hpp"

namespace pvlseg {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

// Container layout:
//   "PVLSEGCK" | u32 version | u64 config hash | u64 record count
//   per record: u32 name length | name | u8 dtype | u32 rank | u64 extents[rank] | raw values
inline constexpr char kCheckpointMagic[8] = {'P', 'V', 'L', 'S', 'E', 'G', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

inline std::size_t dtype_size(DType d) { return d == DType::F64 ? 8 : d == DType::F32 ? 4 : 1; }

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::F32;
  else if constexpr (std::is_same_v<T, double>) return DType::F64;
  else return DType::U8;
}

struct TensorRecord {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::vector<unsigned char> bytes;

  template <class T>
  static TensorRecord of(std::string name, Shape shape, const std::vector<T>& values) {
    TensorRecord r{std::move(name), dtype_of<T>(), std::move(shape), {}};
    r.bytes.resize(values.size() * sizeof(T));
    if (!values.empty()) std::memcpy(r.bytes.data(), values.data(), r.bytes.size());
    return r;
  }

  static TensorRecord text(std::string name, const std::string& s) {
    return of<unsigned char>(std::move(name), {s.size()}, std::vector<unsigned char>(s.begin(), s.end()));
  }

  template <class T>
  std::vector<T> values() const {
    if (dtype != dtype_of<T>()) throw InputError("checkpoint: record '" + name + "' has a different dtype");
    std::vector<T> v(bytes.size() / sizeof(T));
    if (!v.empty()) std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
  }

  std::string as_text() const {
    auto v = values<unsigned char>();
    return {v.begin(), v.end()};
  }
};

struct CheckpointFile {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_hash = 0;
  std::vector<TensorRecord> records;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
  const TensorRecord& at(const std::string& name) const {
    const auto* r = find(name);
    if (!r) throw InputError("checkpoint: missing record '" + name + "'");
    return *r;
  }
};

namespace detail {

template <class V>
void put(std::ostream& f, V v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V get(std::istream& f, const std::string& path) {
  V v{};
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw InputError(path + ": truncated checkpoint");
  return v;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const CheckpointFile& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(f, ck.version);
  detail::put<std::uint64_t>(f, ck.config_hash);
  detail::put<std::uint64_t>(f, ck.records.size());
  for (const auto& r : ck.records) {
    detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(r.name.size()));
    f.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::put<std::uint8_t>(f, static_cast<std::uint8_t>(r.dtype));
    detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) detail::put<std::uint64_t>(f, e);
    f.write(reinterpret_cast<const char*>(r.bytes.data()), static_cast<std::streamsize>(r.bytes.size()));
  }
  if (!f) throw IoError("short write to checkpoint " + path);
}

inline CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw InputError(path + ": not a pvlseg checkpoint");
  CheckpointFile ck;
  ck.version = detail::get<std::uint32_t>(f, path);
  if (ck.version != kCheckpointVersion)
    throw InputError(path + ": unsupported checkpoint version " + std::to_string(ck.version));
  ck.config_hash = detail::get<std::uint64_t>(f, path);
  const auto n = detail::get<std::uint64_t>(f, path);
  for (std::uint64_t i = 0; i < n; ++i) {
    TensorRecord r;
    const auto len = detail::get<std::uint32_t>(f, path);
    if (len > 4096) throw InputError(path + ": implausible tensor name length");
    r.name.resize(len);
    f.read(r.name.data(), len);
    const auto tag = detail::get<std::uint8_t>(f, path);
    if (tag > 2) throw InputError(path + ": unknown dtype tag in record '" + r.name + "'");
    r.dtype = static_cast<DType>(tag);
    const auto rank = detail::get<std::uint32_t>(f, path);
    if (rank > 8) throw InputError(path + ": implausible rank in record '" + r.name + "'");
    for (std::uint32_t k = 0; k < rank; ++k) r.shape.push_back(detail::get<std::uint64_t>(f, path));
    r.bytes.resize(shape_numel(r.shape) * dtype_size(r.dtype));
    f.read(reinterpret_cast<char*>(r.bytes.data()), static_cast<std::streamsize>(r.bytes.size()));
    if (!f) throw InputError(path + ": truncated data in record '" + r.name + "'");
    ck.records.push_back(std::move(r));
  }
  return ck;
}

inline std::string join_tokens(const Vocabulary& v) {
  std::string s;
  for (const auto& t : v.tokens()) s += t + '\n';
  return s;
}

// Parameters, optimiser moments, step counter, the run configuration text
// and the vocabulary.
template <class T>
CheckpointFile make_checkpoint(const PvlSegModel<T>& model, const Adam<T>* opt, const std::string& config_text,
                               std::uint64_t config_hash) {
  CheckpointFile ck;
  ck.config_hash = config_hash;
  ck.records.push_back(TensorRecord::text("meta.config", config_text));
  ck.records.push_back(TensorRecord::text("meta.vocab", join_tokens(model.vocab)));
  const auto named = model.named_tensors();
  for (const auto& [name, t] : named) ck.records.push_back(TensorRecord::of<T>("param." + name, t.shape(), t.values()));
  if (opt) {
    ck.records.push_back(TensorRecord::of<double>("adam.step", {}, {static_cast<double>(opt->steps())}));
    for (std::size_t i = 0; i < named.size(); ++i) {
      ck.records.push_back(TensorRecord::of<T>("adam.m." + named[i].first, named[i].second.shape(),
                                               opt->first_moments()[i]));
      ck.records.push_back(TensorRecord::of<T>("adam.v." + named[i].first, named[i].second.shape(),
                                               opt->second_moments()[i]));
    }
  }
  return ck;
}

inline Vocabulary vocabulary_from(const CheckpointFile& ck) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : ck.at("meta.vocab").as_text()) {
    if (c == '\n') {
      tokens.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  return Vocabulary::from_tokens(std::move(tokens));
}

// Copies stored parameters (and moments, when `opt` is given) into a model
// built from the same configuration.
template <class T>
void restore(const CheckpointFile& ck, PvlSegModel<T>& model, Adam<T>* opt = nullptr) {
  auto named = model.named_tensors();
  for (auto& [name, t] : named) {
    const auto& r = ck.at("param." + name);
    if (r.shape != t.shape())
      throw InputError("checkpoint: '" + name + "' has shape " + shape_str(r.shape) + ", model expects " +
                       shape_str(t.shape()));
    t.values() = r.template values<T>();
  }
  if (opt) {
    if (const auto* s = ck.find("adam.step")) {
      opt->set_steps(static_cast<std::size_t>(s->values<double>().at(0)));
      for (std::size_t i = 0; i < named.size(); ++i) {
        opt->first_moments()[i] = ck.at("adam.m." + named[i].first).template values<T>();
        opt->second_moments()[i] = ck.at("adam.v." + named[i].first).template values<T>();
      }
    }
  }
}

}  // namespace pvlseg
