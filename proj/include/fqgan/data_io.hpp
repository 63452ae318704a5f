#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "fqgan/binary_io.hpp"
#include "fqgan/config.hpp"
#include "fqgan/quantizer.hpp"

namespace fqgan {

/// Images as (N, 3, S, S) floats in [-1, 1], labelled by class-subdirectory index.
struct ImageDataset {
    torch::Tensor images;
    std::vector<int> labels;
    std::vector<std::string> class_names;
    std::vector<std::filesystem::path> files;
    int skipped = 0;  // unreadable files

    std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
    /// Image ids are enumeration indices (sorted class dir, then sorted file name).
    std::vector<std::uint64_t> ids() const;
    ImageDataset subset(const std::vector<std::int64_t>& indices) const;
};

/// 8-bit value -> [-1, 1].
inline float normalize_pixel(std::uint8_t v) { return static_cast<float>(v) * 2.0f / 255.0f - 1.0f; }
/// [-1, 1] -> 8-bit, clamped, affine map with round-half-up.
std::uint8_t denormalize_pixel(float v);

/// Reads `<root>/<class>/<image>.png`. Unreadable files are skipped and counted; an empty result throws.
ImageDataset load_image_folder(const std::filesystem::path& root, int image_size);

/// Permutation of [0, n) determined by `seed` alone.
std::vector<std::int64_t> shuffled_order(std::int64_t n, std::uint64_t seed);

/// RGB PNG decode into (3, H, W) in [-1, 1]; throws FormatError on failure.
torch::Tensor read_png(const std::filesystem::path& path);
/// (3, H, W) in [-1, 1] -> RGB PNG.
void write_png(const torch::Tensor& image, const std::filesystem::path& path);
/// Bilinear resize of (3, H, W) or (N, 3, H, W) to size x size.
torch::Tensor resize_bilinear(const torch::Tensor& images, int size);

// ---- token cache (magic FQTK) ----

inline constexpr std::uint16_t kTokenCacheVersion = 1;
inline constexpr std::uint16_t kNoLabel = 0xFFFF;

struct TokenCache {
    int k = 0;
    int grid_h = 0;
    int grid_w = 0;
    std::vector<std::uint32_t> codebook_sizes;
    std::vector<FactorizedTokenGrid> grids;

    static std::size_t header_bytes(int k) { return 4 + 2 + 1 + 2 + 2 + 4 + 4 * static_cast<std::size_t>(k); }
    std::size_t record_bytes() const { return 2 + 4 * static_cast<std::size_t>(grid_h) * grid_w * k; }
    bool operator==(const TokenCache&) const = default;
};

TokenCache make_token_cache(std::vector<FactorizedTokenGrid> grids, std::vector<std::uint32_t> codebook_sizes);
std::vector<std::uint8_t> encode_token_cache(const TokenCache& cache);
TokenCache decode_token_cache(std::vector<std::uint8_t> bytes);
void write_token_cache(const TokenCache& cache, const std::filesystem::path& path);
TokenCache read_token_cache(const std::filesystem::path& path);

// ---- checkpoints ----

struct CheckpointManifest {
    std::string kind;   // "tokenizer" or "far"
    KeyValues config;   // config snapshot
    std::int64_t step = 0;
    std::string weights_file;  // relative to the manifest's directory
    std::string sha256;

    bool operator==(const CheckpointManifest&) const = default;
};

std::string sha256_hex(const std::string& bytes);

/// Writes `blob` next to the manifest and the manifest itself (JSON); fills in the hash.
CheckpointManifest save_checkpoint(const std::filesystem::path& manifest_path, CheckpointManifest manifest,
                                   const std::string& blob);

struct LoadedCheckpoint {
    CheckpointManifest manifest;
    std::string blob;
};

/// Reads the manifest and blob; throws FormatError when the hash does not verify.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& manifest_path);
CheckpointManifest read_manifest(const std::filesystem::path& manifest_path);

/// Throws ConfigError naming the first key whose value differs between snapshot and expected.
void require_compatible(const KeyValues& snapshot, const KeyValues& expected, const std::vector<std::string>& keys);

std::string archive_to_bytes(torch::serialize::OutputArchive& archive);
void archive_from_bytes(torch::serialize::InputArchive& archive, const std::string& bytes);

}  // namespace fqgan
