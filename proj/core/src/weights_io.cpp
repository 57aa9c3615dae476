// Weight file layout, all integers little-endian:
//   "CSEGW1"                      6 bytes
//   config fingerprint            u64
//   tensor count                  u32
//   per tensor:
//     name length, name bytes     u32, bytes
//     rank, extents               u32, u32 * rank
//     values                      f32 * product(extents)

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cseg/errors.hpp"
#include "cseg/unet.hpp"

namespace cseg {
namespace {

constexpr char kMagic[6] = {'C', 'S', 'E', 'G', 'W', '1'};

static_assert(std::endian::native == std::endian::little, "weight I/O assumes a little-endian host");

template <typename U>
void put(std::string& buf, U v) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  buf.append(bytes, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <typename U>
  U get(const char* field) {
    need(sizeof(U), field);
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string bytes(std::size_t n, const char* field) {
    need(n, field);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void floats(float* dst, std::size_t n, const char* field) {
    need(n * sizeof(float), field);
    std::memcpy(dst, data_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }

  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const char* field) const {
    if (data_.size() - pos_ < n)
      throw FormatError(field, "file truncated at byte " + std::to_string(pos_) + " (needed " + std::to_string(n) +
                                   " more bytes)");
  }

  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_weights(const ModelWeights& weights, const std::filesystem::path& path) {
  std::string buf(kMagic, sizeof(kMagic));
  put<std::uint64_t>(buf, weights.config_fingerprint);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(weights.tensors.size()));
  for (const auto& t : weights.tensors) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.name.size()));
    buf += t.name;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.value.rank()));
    for (auto e : t.value.shape()) put<std::uint32_t>(buf, static_cast<std::uint32_t>(e));
    buf.append(reinterpret_cast<const char*>(t.value.data()), t.value.size() * sizeof(float));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ModelWeights read_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Reader r(std::string(std::istreambuf_iterator<char>(in), {}));

  if (r.bytes(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic)))
    throw FormatError("magic", "not a CSEGW1 weight file: " + path.string());
  ModelWeights w;
  w.config_fingerprint = r.get<std::uint64_t>("fingerprint");
  const auto count = r.get<std::uint32_t>("tensor_count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("name_length");
    if (name_len == 0 || name_len > 4096) throw FormatError("name_length", "implausible tensor name length");
    std::string name = r.bytes(name_len, "name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw FormatError("rank", "implausible rank " + std::to_string(rank) + " for " + name);
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t a = 0; a < rank; ++a) {
      const auto e = r.get<std::uint32_t>("extents");
      if (e == 0) throw FormatError("extents", "zero extent in tensor " + name);
      // Bounding by the bytes left also rules out overflow of the product.
      if (n > r.remaining() / sizeof(float) / e)
        throw FormatError("extents", "tensor " + name + " is larger than the remaining file");
      n *= e;
      shape.push_back(e);
    }
    std::vector<float> values(n);
    r.floats(values.data(), n, "data");
    w.tensors.push_back({std::move(name), Tensor<float>(std::move(shape), std::move(values))});
  }
  if (!r.at_end()) throw FormatError("data", "trailing bytes after the tensor table");
  return w;
}

}  // namespace cseg
