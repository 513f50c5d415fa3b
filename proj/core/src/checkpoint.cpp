#include "uvflow/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "uvflow/error.hpp"
#include "uvflow/io.hpp"

namespace uvflow::ckpt {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (pos + n > buf.size()) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

template <typename T>
NamedTensor make(std::string name, DType dt, const BasicTensor<T>& t) {
  NamedTensor n;
  n.name = std::move(name);
  n.dtype = dt;
  n.shape = t.shape();
  n.bytes.resize(t.size() * sizeof(T));
  if (!n.bytes.empty()) std::memcpy(n.bytes.data(), t.data(), n.bytes.size());
  return n;
}

template <typename Out, typename In>
BasicTensor<Out> convert(const NamedTensor& n) {
  std::size_t count = n.bytes.size() / sizeof(In);
  std::vector<In> raw(count);
  if (count) std::memcpy(raw.data(), n.bytes.data(), n.bytes.size());
  return BasicTensor<Out>(n.shape, std::vector<Out>(raw.begin(), raw.end()));
}

}  // namespace

NamedTensor NamedTensor::from(std::string name, const Tensor& t) { return make(std::move(name), DType::f64, t); }
NamedTensor NamedTensor::from(std::string name, const TensorF& t) { return make(std::move(name), DType::f32, t); }

Tensor NamedTensor::as_double() const {
  return dtype == DType::f64 ? convert<double, double>(*this) : convert<double, float>(*this);
}

TensorF NamedTensor::as_float() const {
  return dtype == DType::f32 ? convert<float, float>(*this) : convert<float, double>(*this);
}

const NamedTensor* File::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string serialize(const File& f) {
  if (f.magic.size() != 6) throw ValidationError("checkpoint magic must be 6 bytes");
  std::string out = f.magic;
  put_u32(out, f.version);
  put_u32(out, static_cast<std::uint32_t>(f.metadata.size()));
  out += f.metadata;
  put_u32(out, static_cast<std::uint32_t>(f.tensors.size()));
  for (const auto& t : f.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    out.push_back(static_cast<char>(t.dtype));
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.bytes.data()), t.bytes.size());
  }
  return out;
}

File parse(const std::string& buf, const std::string& expected_magic, std::uint32_t expected_version) {
  Reader r{buf};
  File f;
  f.magic = r.bytes(6, "magic");
  if (f.magic != expected_magic) throw FormatError("bad checkpoint magic (not a " + expected_magic.substr(0, 5) + " file)");
  f.version = r.u32("version");
  if (f.version != expected_version) {
    throw FormatError("unsupported checkpoint version " + std::to_string(f.version) + " (expected " +
                      std::to_string(expected_version) + ")");
  }
  f.metadata = r.bytes(r.u32("metadata length"), "metadata");
  std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.u32("tensor name length"), "tensor name");
    auto dt = static_cast<std::uint8_t>(r.bytes(1, "dtype")[0]);
    if (dt > 1) throw FormatError("tensor '" + t.name + "' has unknown dtype " + std::to_string(dt));
    t.dtype = static_cast<DType>(dt);
    std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw FormatError("tensor '" + t.name + "' has implausible rank");
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      std::uint32_t d = r.u32("dims");
      t.shape.push_back(static_cast<int>(d));
      numel *= d;
    }
    std::size_t width = t.dtype == DType::f32 ? 4 : 8;
    std::string data = r.bytes(numel * width, "tensor data");
    t.bytes.assign(data.begin(), data.end());
    f.tensors.push_back(std::move(t));
  }
  if (r.pos != buf.size()) throw FormatError("trailing bytes after checkpoint tensors");
  return f;
}

void save(const std::filesystem::path& path, const File& f) { io::write_atomic(path, serialize(f)); }

File load(const std::filesystem::path& path, const std::string& expected_magic, std::uint32_t expected_version) {
  return parse(io::read_text(path), expected_magic, expected_version);
}

}  // namespace uvflow::ckpt
