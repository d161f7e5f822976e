#pragma once

// Tensor files, checkpoints and detection/ground-truth records.
//
// TensorFile (all integers little-endian):
//   "CAFT" | u16 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u64 dims | payload
//
// Checkpoint:
//   "CAFC" | u16 version=1
//   u32 config_count, then per item: u32 len, key bytes, u32 len, value bytes
//   u32 entry_count,  then per entry: u32 len, name bytes, u64 offset, u64 length
//   payload region: the TensorFile encodings of every entry, back to back; offsets
//   are relative to the start of this region.
//
// Detection records, one per line, '#' starts a comment line:
//   image_id,class_id,score,x1,y1,x2,y2     (ground truth omits score)

#include "caf/blocks.hpp"
#include "caf/metrics.hpp"
#include "caf/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace caf {

enum class FormatErrc {
  corrupt_magic,
  version_unsupported,
  dtype_unsupported,
  shape_mismatch,
  dimension_overflow,
  truncated,
  duplicate_name,
  malformed_line,
  io_failure,
};

const char* to_string(FormatErrc code);

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  FormatErrc code() const { return code_; }

 private:
  FormatErrc code_;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename Scalar>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::f32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::f64;
}

using Bytes = std::vector<unsigned char>;

/// A tensor as stored: dtype, logical dims and little-endian element bytes.
struct RawTensor {
  DType dtype = DType::f32;
  Dims dims;
  Bytes payload;

  std::uint64_t element_count() const;
  friend bool operator==(const RawTensor&, const RawTensor&) = default;
};

Bytes encode_tensor(const RawTensor& t);
/// Decodes one TensorFile starting at bytes[0]. When `consumed` is null the whole
/// buffer must be exactly one tensor.
RawTensor decode_tensor(std::span<const unsigned char> bytes, std::size_t* consumed = nullptr);

/// `dims` defaults to the Tensor4 shape; any dims with the same element count are accepted.
template <typename Scalar>
RawTensor to_raw(const Tensor4<Scalar>& t, Dims dims = {});

/// Rank <= 4 dims are left-padded with 1s to form the shape.
template <typename Scalar>
Tensor4<Scalar> from_raw(const RawTensor& raw);
/// Reinterprets the stored elements with the given shape; element counts and dtype must agree.
template <typename Scalar>
Tensor4<Scalar> from_raw(const RawTensor& raw, const Shape4& shape);

template <typename Scalar>
void write_tensor(const std::filesystem::path& path, const Tensor4<Scalar>& t);
template <typename Scalar>
Tensor4<Scalar> read_tensor(const std::filesystem::path& path);

struct CheckpointEntry {
  std::string name;
  RawTensor tensor;
  friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<CheckpointEntry> entries;

  const std::string* config_value(std::string_view key) const;
  /// Throws FormatError(shape_mismatch) when the key is absent.
  const std::string& require(std::string_view key) const;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

Bytes encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Appends every parameter of `params` (visitor order, names under `prefix`).
template <typename Params>
void store_params(const Params& params, const std::string& prefix, Checkpoint& ckpt) {
  for_each_param(params, prefix, [&](const std::string& name, const auto& t, const Dims& dims) {
    ckpt.entries.push_back({name, to_raw(t, dims)});
  });
}

namespace detail {
[[noreturn]] void checkpoint_mismatch(const std::string& what);
}

/// Loads entries [first, first + count) into `params`; names, dims and dtype must
/// match the architecture exactly. Returns the number of entries consumed.
template <typename Params>
std::size_t load_params(const Checkpoint& ckpt, std::size_t first, const std::string& prefix, Params& params) {
  std::size_t i = first;
  for_each_param(params, prefix, [&](const std::string& name, auto& t, const Dims& dims) {
    using Scalar = typename std::remove_cvref_t<decltype(t)>::value_type;
    if (i >= ckpt.entries.size()) detail::checkpoint_mismatch("missing parameter " + name);
    const CheckpointEntry& e = ckpt.entries[i++];
    if (e.name != name) detail::checkpoint_mismatch("expected parameter " + name + ", found " + e.name);
    if (e.tensor.dims != dims) detail::checkpoint_mismatch("dims of " + name + " do not match the architecture");
    t = from_raw<Scalar>(e.tensor, t.shape());
  });
  return i - first;
}

// Detection / ground-truth records.

struct DetectionRecord {
  std::string image_id;
  DetBox box;
  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

std::string format_detections(std::span<const DetectionRecord> records, bool with_score);
std::vector<DetectionRecord> parse_detections(std::string_view text, bool with_score);
void write_detections(const std::filesystem::path& path, std::span<const DetectionRecord> records, bool with_score);
std::vector<DetectionRecord> read_detections(const std::filesystem::path& path, bool with_score);

/// Boxes grouped per image in the order of `image_ids`; unknown ids are an error.
std::vector<std::vector<DetBox>> group_by_image(std::span<const DetectionRecord> records,
                                                std::span<const std::string> image_ids);

// File helpers shared by the CLI: whole-file reads and write-to-temp-then-rename.
Bytes read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

}  // namespace caf
