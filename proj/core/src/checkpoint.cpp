#include "facediff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace facediff::io {

namespace {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

template <class T>
void put_le(std::string& out, T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

void put_string(std::string& out, std::string_view s) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.append(s.data(), s.size());
}

void put_floats(std::string& out, const Tensor32& t) {
  for (Eigen::Index i = 0; i < t.size(); ++i) put_le<float>(out, t.data()[i]);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
    }
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  Tensor32 get_tensor(std::uint32_t rows, std::uint32_t cols) {
    Tensor32 t(rows, cols);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = get<float>();
    return t;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw ParseError("checkpoint truncated at byte " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize(const Checkpoint& ckpt) {
  std::string out;
  out.append(kCheckpointMagic.data(), kCheckpointMagic.size());
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_string(out, format_key_values(ckpt.metadata));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_string(out, name);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rows()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.cols()));
    put_floats(out, t);
  }
  put_le<std::uint8_t>(out, ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    put_le<std::uint64_t>(out, o.step);
    put_le<double>(out, o.learning_rate);
    put_le<double>(out, o.beta1);
    put_le<double>(out, o.beta2);
    put_le<double>(out, o.epsilon);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(o.first_moment.size()));
    for (const auto& [name, m] : o.first_moment) {
      const auto& v = o.second_moment.at(name);
      put_string(out, name);
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
      put_floats(out, m);
      put_floats(out, v);
    }
  }
  return out;
}

Checkpoint deserialize(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() ||
      bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw ParseError("not a facediff checkpoint (bad magic)");
  }
  Reader r(bytes.substr(kCheckpointMagic.size()));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.metadata = parse_key_values(r.get_string(), "checkpoint metadata");
  const auto count = r.get<std::uint32_t>();
  std::string prev;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.get_string();
    if (i > 0 && name <= prev) throw ParseError("checkpoint tensors not sorted by name");
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    ckpt.tensors[name] = r.get_tensor(rows, cols);
    prev = std::move(name);
  }
  const auto has_opt = r.get<std::uint8_t>();
  if (has_opt > 1) throw ParseError("bad optimizer flag in checkpoint");
  if (has_opt) {
    OptimizerSnapshot o;
    o.step = r.get<std::uint64_t>();
    o.learning_rate = r.get<double>();
    o.beta1 = r.get<double>();
    o.beta2 = r.get<double>();
    o.epsilon = r.get<double>();
    const auto n = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      const auto name = r.get_string();
      const auto rows = r.get<std::uint32_t>();
      const auto cols = r.get<std::uint32_t>();
      o.first_moment[name] = r.get_tensor(rows, cols);
      o.second_moment[name] = r.get_tensor(rows, cols);
    }
    ckpt.optimizer = std::move(o);
  }
  if (!r.done()) throw ParseError("trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_text_file(path, serialize(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize(read_text_file(path));
}

}  // namespace facediff::io
