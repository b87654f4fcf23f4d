#include "hts/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace hts {

namespace le {

namespace {

template <typename U>
void write_uint(std::ostream& out, U v) {
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, sizeof(U));
}

template <typename U>
U read_uint(std::istream& in) {
  unsigned char buf[sizeof(U)];
  read_exact(in, reinterpret_cast<char*>(buf), sizeof(U));
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u8(std::ostream& out, std::uint8_t v) { write_uint(out, v); }
void write_u16(std::ostream& out, std::uint16_t v) { write_uint(out, v); }
void write_u32(std::ostream& out, std::uint32_t v) { write_uint(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_uint(out, v); }
std::uint8_t read_u8(std::istream& in) { return read_uint<std::uint8_t>(in); }
std::uint16_t read_u16(std::istream& in) { return read_uint<std::uint16_t>(in); }
std::uint32_t read_u32(std::istream& in) { return read_uint<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return read_uint<std::uint64_t>(in); }

void read_exact(std::istream& in, char* dst, std::size_t n) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError("unexpected end of data");
}

}  // namespace le

namespace {

constexpr char kMagic[4] = {'H', 'T', 'S', 'T'};
// Guards against allocating absurd sizes from a corrupted header.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

struct Header {
  Shape shape;
  DType dtype;
};

Header read_header(std::istream& in) {
  char magic[4];
  le::read_exact(in, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad tensor magic");
  const std::uint16_t version = le::read_u16(in);
  if (version != kTensorFormatVersion) {
    throw FormatError("unsupported tensor format version " + std::to_string(version));
  }
  const std::uint16_t rank = le::read_u16(in);
  Header h;
  std::uint64_t count = 1;
  for (std::uint16_t i = 0; i < rank; ++i) {
    const std::uint64_t e = le::read_u64(in);
    if (e == 0) throw FormatError("zero tensor extent");
    count *= e;
    if (count > kMaxElements) throw FormatError("tensor too large");
    h.shape.push_back(static_cast<std::size_t>(e));
  }
  const std::uint8_t tag = le::read_u8(in);
  if (tag != static_cast<std::uint8_t>(DType::f32) && tag != static_cast<std::uint8_t>(DType::f64)) {
    throw FormatError("unknown dtype tag " + std::to_string(tag));
  }
  h.dtype = static_cast<DType>(tag);
  return h;
}

template <typename T>
Tensor<T> read_body(std::istream& in, Shape shape) {
  const std::size_t n = shape_size(shape);
  std::vector<char> raw(n * sizeof(T));
  le::read_exact(in, raw.data(), raw.size());
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    Bits<T> bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) {
      bits |= static_cast<Bits<T>>(static_cast<unsigned char>(raw[i * sizeof(T) + b])) << (8 * b);
    }
    data[i] = std::bit_cast<T>(bits);
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  out.write(kMagic, 4);
  le::write_u16(out, kTensorFormatVersion);
  le::write_u16(out, static_cast<std::uint16_t>(t.rank()));
  for (std::size_t e : t.shape()) le::write_u64(out, e);
  le::write_u8(out, static_cast<std::uint8_t>(dtype_of<T>()));
  std::vector<char> raw(t.size() * sizeof(T));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const Bits<T> bits = std::bit_cast<Bits<T>>(t[i]);
    for (std::size_t b = 0; b < sizeof(T); ++b) {
      raw[i * sizeof(T) + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
  }
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("failed writing tensor");
}

template <typename T>
Tensor<T> read_tensor(std::istream& in) {
  Header h = read_header(in);
  if (h.dtype != dtype_of<T>()) {
    throw FormatError(std::string("tensor dtype is ") + (h.dtype == DType::f32 ? "f32" : "f64") +
                      ", expected " + (dtype_of<T>() == DType::f32 ? "f32" : "f64"));
  }
  return read_body<T>(in, std::move(h.shape));
}

std::variant<TensorF, TensorD> read_any_tensor(std::istream& in) {
  Header h = read_header(in);
  if (h.dtype == DType::f32) return read_body<float>(in, std::move(h.shape));
  return read_body<double>(in, std::move(h.shape));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor<T>(in);
}

template void write_tensor(std::ostream&, const TensorF&);
template void write_tensor(std::ostream&, const TensorD&);
template TensorF read_tensor<float>(std::istream&);
template TensorD read_tensor<double>(std::istream&);
template void save_tensor(const std::filesystem::path&, const TensorF&);
template void save_tensor(const std::filesystem::path&, const TensorD&);
template TensorF load_tensor<float>(const std::filesystem::path&);
template TensorD load_tensor<double>(const std::filesystem::path&);

}  // namespace hts
