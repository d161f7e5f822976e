#include "caf/dataset.hpp"

#include <charconv>
#include <cstdio>
#include <random>
#include <sstream>

namespace caf {

namespace fs = std::filesystem;

std::string image_id(Index i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%05lld", static_cast<long long>(i));
  return buf;
}

namespace {

std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return {buf, end};
}

std::string describe(const SceneConfig& s) {
  std::ostringstream os;
  os << "# synthetic disc scenes\n"
     << "version=1\n"
     << "scene_seed=" << s.seed << '\n'
     << "height=" << s.height << '\n'
     << "width=" << s.width << '\n'
     << "classes=" << s.class_count() << '\n';
  for (std::size_t k = 0; k < s.classes.size(); ++k) {
    os << "class" << k << "=radius " << num(s.classes[k].radius_min) << '-' << num(s.classes[k].radius_max)
       << " intensity " << num(s.classes[k].intensity) << '\n';
  }
  os << "objects=" << s.min_objects << '-' << s.max_objects << '\n'
     << "noise=" << num(s.noise) << '\n'
     << "blur=" << s.blur << '\n';
  return os.str();
}

}  // namespace

void write_dataset(const fs::path& dir, const SceneConfig& scene, Index count) {
  scene.validate();
  if (count < 0) throw std::invalid_argument("dataset: count must be >= 0");
  if (fs::exists(dir) && !fs::exists(dir / "manifest.txt")) {
    throw FormatError(FormatErrc::io_failure, dir.string() + " exists and is not a dataset; refusing to replace it");
  }
  fs::path tmp = dir;
  tmp += ".partial";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  try {
    fs::create_directories(tmp / "images");
    std::string manifest = describe(scene);
    manifest += "count=" + std::to_string(count) + '\n';
    std::vector<DetectionRecord> gts;
    for (Index i = 0; i < count; ++i) {
      const Scene s = gen_scene(scene, static_cast<std::uint64_t>(i));
      const std::string id = image_id(i);
      const std::string rel = "images/" + id + ".caft";
      write_tensor(tmp / rel, s.image);
      for (const DetBox& b : s.gts) gts.push_back({id, b});
      manifest += "image=" + id + ',' + rel + '\n';
    }
    write_detections(tmp / "gts.csv", gts, false);
    write_text_atomic(tmp / "manifest.txt", manifest);
    // Re-read everything just written; a dataset that fails its own checks is not published.
    const Dataset check = read_dataset(tmp);
    if (static_cast<Index>(check.scenes.size()) != count) {
      throw FormatError(FormatErrc::shape_mismatch, "dataset self-check: image count differs");
    }
  } catch (...) {
    fs::remove_all(tmp, ec);
    throw;
  }
  if (fs::exists(dir)) fs::remove_all(dir);
  fs::rename(tmp, dir);
}

Dataset read_dataset(const fs::path& dir) {
  const Bytes raw = read_file(dir / "manifest.txt");
  std::istringstream in(std::string(raw.begin(), raw.end()));
  Dataset ds;
  std::vector<std::string> paths;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(FormatErrc::malformed_line, "manifest line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "image") {
      const auto comma = value.find(',');
      if (comma == std::string::npos || comma == 0 || comma + 1 == value.size()) {
        throw FormatError(FormatErrc::malformed_line, "manifest line " + std::to_string(line_no) + ": expected image=<id>,<path>");
      }
      ds.ids.push_back(value.substr(0, comma));
      paths.push_back(value.substr(comma + 1));
    } else {
      ds.info.emplace_back(key, value);
    }
  }
  for (const auto& [k, v] : ds.info) {
    if (k == "count" && v != std::to_string(ds.ids.size())) {
      throw FormatError(FormatErrc::shape_mismatch, "manifest count=" + v + " but " + std::to_string(ds.ids.size()) +
                                                        " images are listed");
    }
  }
  std::optional<Shape4> shape;
  for (std::size_t i = 0; i < ds.ids.size(); ++i) {
    const RawTensor t = decode_tensor(read_file(dir / paths[i]));
    if (t.dtype != DType::f32 || t.dims.size() != 4 || t.dims[0] != 1 || t.dims[1] != 1) {
      throw FormatError(FormatErrc::shape_mismatch, paths[i] + ": expected a (1, 1, h, w) f32 image");
    }
    Scene s{from_raw<float>(t), {}};
    if (shape && s.image.shape() != *shape) throw FormatError(FormatErrc::shape_mismatch, paths[i] + ": image size differs");
    shape = s.image.shape();
    ds.scenes.push_back(std::move(s));
  }
  const std::vector<DetectionRecord> gts = read_detections(dir / "gts.csv", false);
  const auto grouped = group_by_image(gts, ds.ids);
  for (std::size_t i = 0; i < grouped.size(); ++i) {
    for (const DetBox& b : grouped[i]) {
      if (!b.valid()) throw FormatError(FormatErrc::shape_mismatch, "invalid gt box for " + ds.ids[i]);
    }
    ds.scenes[i].gts = grouped[i];
  }
  return ds;
}

}  // namespace caf
