#include "prinv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "prinv/error.hpp"

namespace prinv {

namespace {

constexpr std::uint8_t kDtypeFloat32 = 1;

class Writer {
 public:
  void u8(std::uint8_t v) { buf.push_back(v); }
  void u16(std::uint16_t v) { uint(v, 2); }
  void u32(std::uint32_t v) { uint(v, 4); }
  void u64(std::uint64_t v) { uint(v, 8); }
  void bytes(const std::string& s) { buf.insert(buf.end(), s.begin(), s.end()); }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }

  std::vector<std::uint8_t> buf;

 private:
  void uint(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf_(b) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(uint(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(uint(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.begin() + pos_, buf_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return buf_.size(); }
  float f32_at(std::size_t at) const {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf_[at + i]) << (8 * i);
    return std::bit_cast<float>(v);
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw IoError("checkpoint truncated");
  }
  std::uint64_t uint(int n) {
    need(n);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(buf_[pos_ + i]) << (8 * i);
    pos_ += n;
    return v;
  }

  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kCheckpointMagic);
  w.u32(static_cast<std::uint32_t>(ckpt.config_text.size()));
  w.bytes(ckpt.config_text);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(kDtypeFloat32);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    const std::uint64_t nbytes = t.numel() * sizeof(float);
    w.u64(offset);
    w.u64(nbytes);
    offset += nbytes;
  }
  for (const auto& entry : ckpt.tensors) {
    for (float v : entry.second.data()) w.f32(v);
  }
  return std::move(w.buf);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.bytes(6) != kCheckpointMagic) throw IoError("not a PRINV1 checkpoint");
  Checkpoint ckpt;
  ckpt.config_text = r.bytes(r.u32());
  const std::uint32_t count = r.u32();
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset, nbytes;
  };
  std::vector<Entry> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.bytes(r.u16());
    if (r.u8() != kDtypeFloat32) throw IoError("unsupported dtype for tensor " + e.name);
    const std::uint8_t ndim = r.u8();
    for (std::uint8_t d = 0; d < ndim; ++d) e.shape.push_back(r.u64());
    e.offset = r.u64();
    e.nbytes = r.u64();
    if (e.nbytes != shape_numel(e.shape) * sizeof(float)) {
      throw IoError("size mismatch for tensor " + e.name);
    }
    manifest.push_back(std::move(e));
  }
  const std::size_t payload = r.pos();
  for (auto& e : manifest) {
    if (payload + e.offset + e.nbytes > r.size()) throw IoError("checkpoint truncated at " + e.name);
    std::vector<float> data(e.nbytes / sizeof(float));
    for (std::size_t j = 0; j < data.size(); ++j) data[j] = r.f32_at(payload + e.offset + 4 * j);
    ckpt.tensors.emplace_back(e.name, Tensor(e.shape, std::move(data)));
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace prinv
