#include "caf/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <unordered_map>

namespace caf {

const char* to_string(FormatErrc code) {
  switch (code) {
    case FormatErrc::corrupt_magic: return "corrupt-magic";
    case FormatErrc::version_unsupported: return "version-unsupported";
    case FormatErrc::dtype_unsupported: return "dtype-unsupported";
    case FormatErrc::shape_mismatch: return "shape-mismatch";
    case FormatErrc::dimension_overflow: return "dimension-overflow";
    case FormatErrc::truncated: return "truncated";
    case FormatErrc::duplicate_name: return "duplicate-name";
    case FormatErrc::malformed_line: return "malformed-line";
    case FormatErrc::io_failure: return "io-failure";
  }
  return "unknown";
}

namespace {

constexpr std::uint16_t kVersion = 1;
constexpr char kTensorMagic[4] = {'C', 'A', 'F', 'T'};
constexpr char kCheckpointMagic[4] = {'C', 'A', 'F', 'C'};

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

class Writer {
 public:
  explicit Writer(Bytes& out) : out_(out) {}

  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void str(const std::string& s) {
    if (s.size() > std::numeric_limits<std::uint32_t>::max()) throw FormatError(FormatErrc::dimension_overflow, "string too long");
    uint(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

 private:
  Bytes& out_;
};

class Reader {
 public:
  Reader(std::span<const unsigned char> in, const char* what) : in_(in), what_(what) {}

  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) {
      throw FormatError(FormatErrc::truncated, std::string(what_) + ": need " + std::to_string(n) + " bytes at offset " +
                                                   std::to_string(pos_) + ", have " + std::to_string(in_.size() - pos_));
    }
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::span<const unsigned char> take(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() {
    const auto n = uint<std::uint32_t>();
    auto s = take(n);
    return {reinterpret_cast<const char*>(s.data()), s.size()};
  }
  void magic(const char (&expected)[4]) {
    if (in_.size() - pos_ < 4 || std::memcmp(in_.data() + pos_, expected, 4) != 0) {
      throw FormatError(FormatErrc::corrupt_magic, std::string(what_) + ": expected magic \"" +
                                                       std::string(expected, 4) + "\"");
    }
    pos_ += 4;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  std::span<const unsigned char> in_;
  std::size_t pos_ = 0;
  const char* what_;
};

bool checked_product(const Dims& dims, std::uint64_t elem, std::uint64_t& out) {
  std::uint64_t acc = 1;
  for (std::uint64_t d : dims) {
    if (__builtin_mul_overflow(acc, d, &acc)) return false;
  }
  if (__builtin_mul_overflow(acc, elem, &out)) return false;
  return true;
}

}  // namespace

std::uint64_t RawTensor::element_count() const {
  std::uint64_t n = 1;
  for (std::uint64_t d : dims) n *= d;
  return n;
}

Bytes encode_tensor(const RawTensor& t) {
  if (t.dims.size() > 255) throw FormatError(FormatErrc::dimension_overflow, "rank exceeds 255");
  std::uint64_t bytes = 0;
  if (!checked_product(t.dims, dtype_size(t.dtype), bytes)) {
    throw FormatError(FormatErrc::dimension_overflow, "element count overflows u64");
  }
  if (bytes != t.payload.size()) {
    throw FormatError(FormatErrc::shape_mismatch, "payload holds " + std::to_string(t.payload.size()) +
                                                      " bytes, dims require " + std::to_string(bytes));
  }
  Bytes out;
  out.reserve(8 + 8 * t.dims.size() + t.payload.size());
  Writer w(out);
  w.raw(kTensorMagic, 4);
  w.uint(kVersion);
  w.uint(static_cast<std::uint8_t>(t.dtype));
  w.uint(static_cast<std::uint8_t>(t.dims.size()));
  for (std::uint64_t d : t.dims) w.uint(d);
  w.raw(t.payload.data(), t.payload.size());
  return out;
}

RawTensor decode_tensor(std::span<const unsigned char> bytes, std::size_t* consumed) {
  Reader r(bytes, "tensor");
  r.magic(kTensorMagic);
  const auto version = r.uint<std::uint16_t>();
  if (version != kVersion) {
    throw FormatError(FormatErrc::version_unsupported, "tensor version " + std::to_string(version));
  }
  const auto dtype = r.uint<std::uint8_t>();
  if (dtype > 1) throw FormatError(FormatErrc::dtype_unsupported, "dtype code " + std::to_string(dtype));
  RawTensor t;
  t.dtype = static_cast<DType>(dtype);
  const auto rank = r.uint<std::uint8_t>();
  for (unsigned i = 0; i < rank; ++i) t.dims.push_back(r.uint<std::uint64_t>());
  std::uint64_t nbytes = 0;
  if (!checked_product(t.dims, dtype_size(t.dtype), nbytes) ||
      nbytes > static_cast<std::uint64_t>(std::numeric_limits<std::ptrdiff_t>::max())) {
    throw FormatError(FormatErrc::dimension_overflow, "dims overflow the addressable size");
  }
  auto payload = r.take(static_cast<std::size_t>(nbytes));
  t.payload.assign(payload.begin(), payload.end());
  if (consumed) {
    *consumed = r.pos();
  } else if (r.remaining() != 0) {
    throw FormatError(FormatErrc::shape_mismatch, std::to_string(r.remaining()) + " trailing bytes after payload");
  }
  return t;
}

template <typename S>
RawTensor to_raw(const Tensor4<S>& t, Dims dims) {
  RawTensor raw;
  raw.dtype = dtype_of<S>();
  raw.dims = dims.empty() ? detail::dims_of(t.shape()) : std::move(dims);
  if (raw.element_count() != static_cast<std::uint64_t>(t.size())) {
    throw FormatError(FormatErrc::shape_mismatch, "dims do not match the tensor element count");
  }
  using U = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  raw.payload.reserve(static_cast<std::size_t>(t.size()) * sizeof(S));
  Writer w(raw.payload);
  for (S v : t.values()) w.uint(std::bit_cast<U>(v));
  return raw;
}

template <typename S>
Tensor4<S> from_raw(const RawTensor& raw, const Shape4& shape) {
  if (raw.dtype != dtype_of<S>()) throw FormatError(FormatErrc::shape_mismatch, "dtype does not match");
  if (raw.element_count() != static_cast<std::uint64_t>(shape.count())) {
    throw FormatError(FormatErrc::shape_mismatch, "element count does not match shape " + to_string(shape));
  }
  using U = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  Tensor4<S> t(shape);
  Reader r(raw.payload, "tensor payload");
  for (Index i = 0; i < t.size(); ++i) t[i] = std::bit_cast<S>(r.uint<U>());
  return t;
}

template <typename S>
Tensor4<S> from_raw(const RawTensor& raw) {
  if (raw.dims.size() > 4) {
    throw FormatError(FormatErrc::shape_mismatch, "rank " + std::to_string(raw.dims.size()) + " does not fit Tensor4");
  }
  std::array<Index, 4> s{1, 1, 1, 1};
  const std::size_t lead = 4 - raw.dims.size();
  for (std::size_t i = 0; i < raw.dims.size(); ++i) {
    if (raw.dims[i] == 0 || raw.dims[i] > static_cast<std::uint64_t>(std::numeric_limits<Index>::max())) {
      throw FormatError(FormatErrc::shape_mismatch, "dims must be in [1, 2^63)");
    }
    s[lead + i] = static_cast<Index>(raw.dims[i]);
  }
  return from_raw<S>(raw, Shape4{s[0], s[1], s[2], s[3]});
}

template <typename S>
void write_tensor(const std::filesystem::path& path, const Tensor4<S>& t) {
  write_file_atomic(path, encode_tensor(to_raw(t)));
}

template <typename S>
Tensor4<S> read_tensor(const std::filesystem::path& path) {
  return from_raw<S>(decode_tensor(read_file(path)));
}

template RawTensor to_raw<float>(const Tensor4<float>&, Dims);
template RawTensor to_raw<double>(const Tensor4<double>&, Dims);
template Tensor4<float> from_raw<float>(const RawTensor&, const Shape4&);
template Tensor4<double> from_raw<double>(const RawTensor&, const Shape4&);
template Tensor4<float> from_raw<float>(const RawTensor&);
template Tensor4<double> from_raw<double>(const RawTensor&);
template void write_tensor<float>(const std::filesystem::path&, const Tensor4<float>&);
template void write_tensor<double>(const std::filesystem::path&, const Tensor4<double>&);
template Tensor4<float> read_tensor<float>(const std::filesystem::path&);
template Tensor4<double> read_tensor<double>(const std::filesystem::path&);

// Checkpoints.

const std::string* Checkpoint::config_value(std::string_view key) const {
  for (const auto& [k, v] : config) {
    if (k == key) return &v;
  }
  return nullptr;
}

const std::string& Checkpoint::require(std::string_view key) const {
  if (const std::string* v = config_value(key)) return *v;
  throw FormatError(FormatErrc::shape_mismatch, "checkpoint config lacks key '" + std::string(key) + "'");
}

namespace detail {
void checkpoint_mismatch(const std::string& what) { throw FormatError(FormatErrc::shape_mismatch, what); }
}  // namespace detail

Bytes encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<Bytes> blobs;
  std::set<std::string> names;
  for (const CheckpointEntry& e : ckpt.entries) {
    if (!names.insert(e.name).second) throw FormatError(FormatErrc::duplicate_name, "parameter '" + e.name + "'");
    blobs.push_back(encode_tensor(e.tensor));
  }
  Bytes out;
  Writer w(out);
  w.raw(kCheckpointMagic, 4);
  w.uint(kVersion);
  w.uint(static_cast<std::uint32_t>(ckpt.config.size()));
  for (const auto& [k, v] : ckpt.config) {
    w.str(k);
    w.str(v);
  }
  w.uint(static_cast<std::uint32_t>(ckpt.entries.size()));
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < ckpt.entries.size(); ++i) {
    w.str(ckpt.entries[i].name);
    w.uint(offset);
    w.uint(static_cast<std::uint64_t>(blobs[i].size()));
    offset += blobs[i].size();
  }
  for (const Bytes& b : blobs) w.raw(b.data(), b.size());
  return out;
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  Reader r(bytes, "checkpoint");
  r.magic(kCheckpointMagic);
  const auto version = r.uint<std::uint16_t>();
  if (version != kVersion) {
    throw FormatError(FormatErrc::version_unsupported, "checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto config_count = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < config_count; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    ckpt.config.emplace_back(std::move(k), std::move(v));
  }
  struct Slot {
    std::string name;
    std::uint64_t offset;
    std::uint64_t length;
  };
  std::vector<Slot> slots;
  std::set<std::string> names;
  const auto entry_count = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < entry_count; ++i) {
    Slot s{r.str(), 0, 0};
    s.offset = r.uint<std::uint64_t>();
    s.length = r.uint<std::uint64_t>();
    if (!names.insert(s.name).second) throw FormatError(FormatErrc::duplicate_name, "parameter '" + s.name + "'");
    slots.push_back(std::move(s));
  }
  const std::size_t base = r.pos();
  const std::size_t region = r.remaining();
  std::uint64_t expected = 0;
  for (const Slot& s : slots) {
    if (s.offset != expected) throw FormatError(FormatErrc::shape_mismatch, "entry '" + s.name + "' is not contiguous");
    if (s.length > region || s.offset > region - s.length) {
      throw FormatError(FormatErrc::truncated, "entry '" + s.name + "' extends past end of file");
    }
    ckpt.entries.push_back({s.name, decode_tensor(bytes.subspan(base + s.offset, s.length))});
    expected = s.offset + s.length;
  }
  if (expected != region) {
    throw FormatError(FormatErrc::shape_mismatch, std::to_string(region - expected) + " trailing bytes after payloads");
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

// Detection records.

namespace {

void append_number(std::string& out, double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, end);
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void malformed(std::size_t line, const std::string& why) {
  throw FormatError(FormatErrc::malformed_line, "line " + std::to_string(line) + ": " + why);
}

double parse_double(std::string_view field, std::size_t line, const char* name) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) malformed(line, std::string("bad ") + name);
  if (!std::isfinite(v)) malformed(line, std::string(name) + " is not finite");
  return v;
}

}  // namespace

std::string format_detections(std::span<const DetectionRecord> records, bool with_score) {
  std::string out = with_score ? "# image_id,class_id,score,x1,y1,x2,y2\n" : "# image_id,class_id,x1,y1,x2,y2\n";
  for (const DetectionRecord& r : records) {
    if (r.image_id.empty() || r.image_id.find_first_of(",\n\r#") != std::string::npos ||
        trim(r.image_id) != r.image_id) {
      throw FormatError(FormatErrc::malformed_line, "image id '" + r.image_id + "' cannot be serialised");
    }
    out += r.image_id;
    out += ',';
    out += std::to_string(r.box.class_id);
    if (with_score) {
      out += ',';
      append_number(out, r.box.score);
    }
    for (double v : {r.box.x1, r.box.y1, r.box.x2, r.box.y2}) {
      out += ',';
      append_number(out, v);
    }
    out += '\n';
  }
  return out;
}

std::vector<DetectionRecord> parse_detections(std::string_view text, bool with_score) {
  std::vector<DetectionRecord> out;
  const std::size_t expected_fields = with_score ? 7 : 6;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.empty() || line.front() == '#') continue;

    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      fields.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (fields.size() != expected_fields) {
      malformed(line_no, "expected " + std::to_string(expected_fields) + " fields, got " + std::to_string(fields.size()));
    }
    DetectionRecord rec;
    rec.image_id = std::string(fields[0]);
    if (rec.image_id.empty()) malformed(line_no, "empty image id");
    int cls = 0;
    auto [ptr, ec] = std::from_chars(fields[1].data(), fields[1].data() + fields[1].size(), cls);
    if (ec != std::errc() || ptr != fields[1].data() + fields[1].size()) malformed(line_no, "bad class id");
    rec.box.class_id = cls;
    std::size_t f = 2;
    if (with_score) {
      rec.box.score = parse_double(fields[f++], line_no, "score");
      if (rec.box.score < 0.0 || rec.box.score > 1.0) malformed(line_no, "score outside [0, 1]");
    }
    rec.box.x1 = parse_double(fields[f++], line_no, "x1");
    rec.box.y1 = parse_double(fields[f++], line_no, "y1");
    rec.box.x2 = parse_double(fields[f++], line_no, "x2");
    rec.box.y2 = parse_double(fields[f++], line_no, "y2");
    if (rec.box.x2 < rec.box.x1 || rec.box.y2 < rec.box.y1) malformed(line_no, "box corners out of order");
    out.push_back(std::move(rec));
  }
  return out;
}

void write_detections(const std::filesystem::path& path, std::span<const DetectionRecord> records, bool with_score) {
  write_text_atomic(path, format_detections(records, with_score));
}

std::vector<DetectionRecord> read_detections(const std::filesystem::path& path, bool with_score) {
  const Bytes bytes = read_file(path);
  return parse_detections(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), with_score);
}

std::vector<std::vector<DetBox>> group_by_image(std::span<const DetectionRecord> records,
                                                std::span<const std::string> image_ids) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < image_ids.size(); ++i) index.emplace(image_ids[i], i);
  std::vector<std::vector<DetBox>> out(image_ids.size());
  for (const DetectionRecord& r : records) {
    auto it = index.find(r.image_id);
    if (it == index.end()) throw FormatError(FormatErrc::shape_mismatch, "unknown image id '" + r.image_id + "'");
    out[it->second].push_back(r.box);
  }
  return out;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrc::io_failure, "cannot open " + path.string());
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw FormatError(FormatErrc::io_failure, "read failed: " + path.string());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatErrc::io_failure, "cannot create " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatErrc::io_failure, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw FormatError(FormatErrc::io_failure, "cannot rename onto " + path.string());
  }
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, {reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

}  // namespace caf
