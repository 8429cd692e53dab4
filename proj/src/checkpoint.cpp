#include "flg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "flg/errors.hpp"

namespace flg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'F', 'L', 'G', '1'};
constexpr std::uint8_t kTagF64 = 1;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint truncated");
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedTensor> tensors) {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (numel(t.shape) != t.value.size()) throw DimensionError("checkpoint tensor '" + t.name + "' has inconsistent shape");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (Index e : t.shape) w.put<std::uint64_t>(static_cast<std::uint64_t>(e));
    w.put<std::uint8_t>(kTagF64);
    w.put_bytes(t.value.data(), static_cast<std::size_t>(t.value.size()) * sizeof(double));
  }
  w.put<std::uint64_t>(fnv1a64(w.bytes));
  return std::move(w.bytes);
}

std::vector<NamedTensor> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 4 + 4 + 8) throw FormatError("checkpoint truncated");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not an FLG1 checkpoint (bad magic)");
  const auto body = bytes.first(bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (fnv1a64(body) != stored) throw FormatError("checkpoint checksum mismatch; file is corrupted");

  Reader r(body);
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = r.get<std::uint32_t>();
    const auto* name = r.take(name_len);
    t.name.assign(reinterpret_cast<const char*>(name), name_len);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 2) throw FormatError("tensor '" + t.name + "' has unsupported rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
    if (r.get<std::uint8_t>() != kTagF64) throw FormatError("tensor '" + t.name + "' has an unknown element type");
    const Index rows = rank == 0 ? 1 : t.shape[0];
    const Index cols = rank == 2 ? t.shape[1] : 1;
    const auto n = static_cast<std::size_t>(rows * cols);
    if (n > r.remaining() / sizeof(double)) throw FormatError("checkpoint truncated");
    t.value.resize(rows, cols);
    std::memcpy(t.value.data(), r.take(n * sizeof(double)), n * sizeof(double));
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("unexpected bytes after the last tensor");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::uint64_t file_checksum(const std::filesystem::path& path) { return fnv1a64(read_bytes(path)); }

const NamedTensor& find_tensor(std::span<const NamedTensor> tensors, const std::string& name) {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

void restore(const std::vector<std::pair<std::string, Tensor*>>& params, std::span<const NamedTensor> tensors,
             const std::string& prefix) {
  for (const auto& [name, t] : params) {
    const NamedTensor& src = find_tensor(tensors, prefix + name);
    if (src.shape != t->shape()) {
      throw DimensionError("checkpoint tensor '" + src.name + "' has shape " + to_string(src.shape) + ", expected " +
                           to_string(t->shape()));
    }
    t->value() = src.value;
  }
}

}  // namespace flg
