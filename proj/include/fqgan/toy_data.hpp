#pragma once

#include <cstdint>
#include <filesystem>

#include "fqgan/data_io.hpp"

namespace fqgan {

/// Procedural two-class corpus: class 0 is soft disks over a colour gradient, class 1 is
/// oriented sinusoidal stripes. Images are (3, size, size) in [-1, 1]; fully determined by seed.
ImageDataset make_toy_dataset(std::int64_t per_class, int size, std::uint64_t seed);

/// Writes the corpus as `<root>/<class>/img_<n>.png`.
void write_image_folder(const ImageDataset& data, const std::filesystem::path& root);

}  // namespace fqgan
