#pragma once

// On-disk datasets: a directory holding manifest.txt, gts.csv and one TensorFile per
// image under images/.
//
// manifest.txt is key=value lines followed by one "image=<id>,<relative path>" line
// per image, in dataset order.

#include "caf/detector.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace caf {

struct Dataset {
  std::vector<std::string> ids;
  std::vector<Scene> scenes;
  std::vector<std::pair<std::string, std::string>> info;  // manifest keys other than image=
};

/// Generates `count` scenes from index 0 and writes them into a fresh directory
/// next to `dir`, renaming it into place only when complete. An existing `dir` is
/// replaced only if it already holds a manifest.
void write_dataset(const std::filesystem::path& dir, const SceneConfig& scene, Index count);

/// Reads and validates a dataset: every image is (1, 1, h, w) f32, every gt refers to
/// a listed image and is a valid box. Throws FormatError.
Dataset read_dataset(const std::filesystem::path& dir);

std::string image_id(Index i);

}  // namespace caf
