#include "expx/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace expx {
namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw FormatError(std::string("checkpoint: truncated while reading ") + what);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_records(const std::vector<Record>& records) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  out.push_back(kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (shape_numel(r.shape) != static_cast<std::int64_t>(r.values.size()))
      throw ShapeError("checkpoint: record " + r.name + " has " + std::to_string(r.values.size()) +
                       " values for shape " + shape_str(r.shape));
    put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : r.values) put_f32(out, v);
  }
  return out;
}

std::vector<Record> decode_records(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic (expected EXPX)");
  Reader rd(bytes.subspan(4));
  const auto version = rd.u8("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  const auto count = rd.u32("record count");
  std::vector<Record> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    Record r;
    r.name = rd.str(rd.u32("name length"), "name");
    const auto ndim = rd.u32("rank");
    if (ndim > 8) throw FormatError("checkpoint: record " + r.name + " has implausible rank");
    for (std::uint32_t i = 0; i < ndim; ++i) r.shape.push_back(rd.u32("extent"));
    const auto n = shape_numel(r.shape);
    r.values.reserve(static_cast<std::size_t>(std::min<std::int64_t>(n, 1 << 24)));
    for (std::int64_t i = 0; i < n; ++i) r.values.push_back(rd.f32("values"));
    out.push_back(std::move(r));
  }
  if (!rd.done()) throw FormatError("checkpoint: trailing bytes after last record");
  return out;
}

void write_records(const std::filesystem::path& path, const std::vector<Record>& records) {
  const auto bytes = encode_records(records);
  // Write-then-rename so an interrupted save never leaves a torn file.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<Record> read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                        std::istreambuf_iterator<char>()};
  return decode_records(bytes);
}

std::string record_section(const std::string& name) {
  const auto dot = name.find('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

const Record* find_record(const std::vector<Record>& records, const std::string& name) {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

template <typename T>
void append_params(std::vector<Record>& out, const std::string& prefix, const ParamSet<T>& params) {
  for (const auto& [name, t] : params.entries())
    out.push_back({prefix + name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
}

template <typename T>
void load_params(const std::vector<Record>& records, const std::string& prefix, ParamSet<T>& params) {
  for (const auto& [name, t] : params.entries()) {
    const Record* r = find_record(records, prefix + name);
    if (!r) throw FormatError("checkpoint: missing parameter " + prefix + name);
    if (r->shape != t.shape())
      throw FormatError("checkpoint: " + prefix + name + " has shape " + shape_str(r->shape) +
                        ", model expects " + shape_str(t.shape()));
    auto dst = Tensor<T>(t).mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r->values[i]);
  }
}

Record scalar_record(std::string name, double value) {
  return {std::move(name), Shape{1}, {static_cast<float>(value)}};
}

double scalar_value(const std::vector<Record>& records, const std::string& name) {
  const Record* r = find_record(records, name);
  if (!r || r->values.size() != 1) throw FormatError("checkpoint: missing scalar " + name);
  return r->values[0];
}

template void append_params(std::vector<Record>&, const std::string&, const ParamSet<float>&);
template void append_params(std::vector<Record>&, const std::string&, const ParamSet<double>&);
template void load_params(const std::vector<Record>&, const std::string&, ParamSet<float>&);
template void load_params(const std::vector<Record>&, const std::string&, ParamSet<double>&);

}  // namespace expx
