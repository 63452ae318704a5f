#include "fqgan/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <json.hpp>
#include <openssl/evp.h>
#include <png.h>

namespace fqgan {

std::vector<std::uint64_t> ImageDataset::ids() const {
    std::vector<std::uint64_t> out(static_cast<std::size_t>(size()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
    return out;
}

ImageDataset ImageDataset::subset(const std::vector<std::int64_t>& indices) const {
    ImageDataset out;
    out.class_names = class_names;
    out.images = images.index_select(0, torch::tensor(indices, torch::kLong));
    for (auto i : indices) {
        out.labels.push_back(labels[static_cast<std::size_t>(i)]);
        if (!files.empty()) out.files.push_back(files[static_cast<std::size_t>(i)]);
    }
    return out;
}

std::uint8_t denormalize_pixel(float v) {
    const double clamped = std::clamp(static_cast<double>(v), -1.0, 1.0);
    return static_cast<std::uint8_t>(std::floor((clamped + 1.0) * 0.5 * 255.0 + 0.5));
}

torch::Tensor read_png(const std::filesystem::path& path) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw FormatError(path.string() + ": " + image.message);
    }
    image.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&image);
        throw FormatError(path.string() + ": " + image.message);
    }
    const auto h = static_cast<std::int64_t>(image.height);
    const auto w = static_cast<std::int64_t>(image.width);
    auto t = torch::from_blob(buf.data(), {h, w, 3}, torch::kUInt8).permute({2, 0, 1}).to(torch::kFloat);
    return t * (2.0 / 255.0) - 1.0;
}

void write_png(const torch::Tensor& image, const std::filesystem::path& path) {
    if (image.dim() != 3 || image.size(0) != 3) throw FormatError("write_png expects a (3, H, W) image");
    const auto hwc = image.detach().to(torch::kFloat).permute({1, 2, 0}).contiguous();
    const auto* p = hwc.data_ptr<float>();
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(hwc.numel()));
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = denormalize_pixel(p[i]);

    png_image out;
    std::memset(&out, 0, sizeof out);
    out.version = PNG_IMAGE_VERSION;
    out.width = static_cast<png_uint_32>(image.size(2));
    out.height = static_cast<png_uint_32>(image.size(1));
    out.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&out, path.c_str(), 0, buf.data(), 0, nullptr)) {
        throw FormatError(path.string() + ": " + out.message);
    }
}

torch::Tensor resize_bilinear(const torch::Tensor& images, int size) {
    const bool single = images.dim() == 3;
    auto batch = single ? images.unsqueeze(0) : images;
    if (batch.size(2) != size || batch.size(3) != size) {
        namespace F = torch::nn::functional;
        batch = F::interpolate(batch, F::InterpolateFuncOptions()
                                          .size(std::vector<std::int64_t>{size, size})
                                          .mode(torch::kBilinear)
                                          .align_corners(false));
    }
    return single ? batch.squeeze(0) : batch;
}

ImageDataset load_image_folder(const std::filesystem::path& root, int image_size) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw FormatError("dataset directory not found: " + root.string());
    ImageDataset ds;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) ds.class_names.push_back(entry.path().filename().string());
    }
    std::sort(ds.class_names.begin(), ds.class_names.end());

    std::vector<torch::Tensor> images;
    for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(root / ds.class_names[c])) {
            if (entry.is_regular_file()) files.push_back(entry.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            try {
                images.push_back(resize_bilinear(read_png(f), image_size));
            } catch (const FormatError&) {
                ++ds.skipped;
                continue;
            }
            ds.labels.push_back(static_cast<int>(c));
            ds.files.push_back(f);
        }
    }
    if (ds.skipped > 0) std::cerr << "warning: skipped " << ds.skipped << " unreadable file(s) under " << root << "\n";
    if (images.empty()) throw FormatError("dataset is empty: " + root.string());
    ds.images = torch::stack(images);
    return ds;
}

std::vector<std::int64_t> shuffled_order(std::int64_t n, std::uint64_t seed) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 rng(seed);
    // Fisher-Yates with explicit modulo draws; std::shuffle's output is implementation-defined.
    for (std::int64_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    return order;
}

// ---- token cache ----

namespace {
constexpr char kTokenMagic[4] = {'F', 'Q', 'T', 'K'};

void check_grids(const TokenCache& cache) {
    for (const auto& g : cache.grids) {
        if (g.k != cache.k || g.grid_h != cache.grid_h || g.grid_w != cache.grid_w ||
            g.tokens.size() != static_cast<std::size_t>(g.num_patches() * g.k)) {
            throw FormatError("token cache: inconsistent grid shape");
        }
        if (g.class_label && (*g.class_label < 0 || *g.class_label >= kNoLabel)) {
            throw FormatError("token cache: label does not fit in u16");
        }
        for (int i = 0; i < g.k; ++i) {
            for (int p = 0; p < g.num_patches(); ++p) {
                if (g.at(p, i) >= cache.codebook_sizes[static_cast<std::size_t>(i)]) {
                    throw FormatError("token cache: token out of range for branch " + std::to_string(i + 1));
                }
            }
        }
    }
}

}  // namespace

TokenCache make_token_cache(std::vector<FactorizedTokenGrid> grids, std::vector<std::uint32_t> codebook_sizes) {
    if (grids.empty()) throw FormatError("token cache needs at least one grid");
    TokenCache c;
    c.k = grids.front().k;
    c.grid_h = grids.front().grid_h;
    c.grid_w = grids.front().grid_w;
    c.codebook_sizes = std::move(codebook_sizes);
    if (static_cast<int>(c.codebook_sizes.size()) != c.k) throw FormatError("token cache: one size per branch required");
    c.grids = std::move(grids);
    check_grids(c);
    return c;
}

std::vector<std::uint8_t> encode_token_cache(const TokenCache& cache) {
    if (cache.k < 1 || cache.k > 255) throw FormatError("token cache: k must be in [1, 255]");
    if (static_cast<int>(cache.codebook_sizes.size()) != cache.k) {
        throw FormatError("token cache: one codebook size per branch required");
    }
    ByteWriter w;
    w.bytes(kTokenMagic, 4);
    w.u16(kTokenCacheVersion);
    w.u8(static_cast<std::uint8_t>(cache.k));
    w.u16(static_cast<std::uint16_t>(cache.grid_h));
    w.u16(static_cast<std::uint16_t>(cache.grid_w));
    w.u32(static_cast<std::uint32_t>(cache.grids.size()));
    for (auto s : cache.codebook_sizes) w.u32(s);
    check_grids(cache);
    for (const auto& g : cache.grids) {
        w.u16(g.class_label ? static_cast<std::uint16_t>(*g.class_label) : kNoLabel);
        for (auto t : g.tokens) w.u32(t);
    }
    return w.buffer();
}

TokenCache decode_token_cache(std::vector<std::uint8_t> bytes) {
    ByteReader r(std::move(bytes));
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kTokenMagic, 4) != 0) throw FormatError("not a token cache (bad magic)");
    const auto version = r.u16();
    if (version != kTokenCacheVersion) throw FormatError("unsupported token cache version " + std::to_string(version));
    TokenCache c;
    c.k = r.u8();
    c.grid_h = r.u16();
    c.grid_w = r.u16();
    const auto count = r.u32();
    if (c.k < 1) throw FormatError("token cache: k must be >= 1");
    for (int i = 0; i < c.k; ++i) c.codebook_sizes.push_back(r.u32());
    const auto expected = TokenCache::header_bytes(c.k) + static_cast<std::size_t>(count) * c.record_bytes();
    if (r.size() < expected) throw FormatError("truncated token cache");
    if (r.size() != expected) throw FormatError("token cache length does not match its header");
    const int patches = c.grid_h * c.grid_w;
    c.grids.reserve(count);
    for (std::uint32_t n = 0; n < count; ++n) {
        FactorizedTokenGrid g;
        g.grid_h = c.grid_h;
        g.grid_w = c.grid_w;
        g.k = c.k;
        const auto label = r.u16();
        if (label != kNoLabel) g.class_label = label;
        g.tokens.resize(static_cast<std::size_t>(patches) * c.k);
        for (int i = 0; i < c.k; ++i) {
            for (int p = 0; p < patches; ++p) {
                const auto t = r.u32();
                if (t >= c.codebook_sizes[static_cast<std::size_t>(i)]) {
                    throw FormatError("token cache: token " + std::to_string(t) + " out of range for branch " +
                                      std::to_string(i + 1) + " (record " + std::to_string(n) + ")");
                }
                g.at(p, i) = t;
            }
        }
        c.grids.push_back(std::move(g));
    }
    return c;
}

void write_token_cache(const TokenCache& cache, const std::filesystem::path& path) {
    const auto bytes = encode_token_cache(cache);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TokenCache read_token_cache(const std::filesystem::path& path) {
    try {
        return decode_token_cache(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---- checkpoints ----

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw FormatError("sha256 failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

CheckpointManifest save_checkpoint(const std::filesystem::path& manifest_path, CheckpointManifest manifest,
                                   const std::string& blob) {
    const auto dir = manifest_path.parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    if (manifest.weights_file.empty()) manifest.weights_file = manifest_path.stem().string() + ".weights";
    manifest.sha256 = sha256_hex(blob);
    {
        std::ofstream out(dir / manifest.weights_file, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + (dir / manifest.weights_file).string());
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    nlohmann::json j;
    j["kind"] = manifest.kind;
    j["step"] = manifest.step;
    j["weights"] = manifest.weights_file;
    j["sha256"] = manifest.sha256;
    j["config"] = manifest.config;
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + manifest_path.string());
    out << j.dump(2) << "\n";
    return manifest;
}

CheckpointManifest read_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw FormatError("cannot open checkpoint manifest " + manifest_path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        CheckpointManifest m;
        m.kind = j.at("kind").get<std::string>();
        m.step = j.at("step").get<std::int64_t>();
        m.weights_file = j.at("weights").get<std::string>();
        m.sha256 = j.at("sha256").get<std::string>();
        m.config = j.at("config").get<KeyValues>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(manifest_path.string() + ": malformed manifest: " + e.what());
    }
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& manifest_path) {
    LoadedCheckpoint out;
    out.manifest = read_manifest(manifest_path);
    const auto blob_path = manifest_path.parent_path() / out.manifest.weights_file;
    const auto bytes = read_file(blob_path);
    out.blob.assign(bytes.begin(), bytes.end());
    if (sha256_hex(out.blob) != out.manifest.sha256) {
        throw FormatError(blob_path.string() + ": content hash does not match the manifest");
    }
    return out;
}

void require_compatible(const KeyValues& snapshot, const KeyValues& expected, const std::vector<std::string>& keys) {
    for (const auto& key : keys) {
        auto a = snapshot.find(key);
        auto b = expected.find(key);
        const std::string va = a == snapshot.end() ? "<missing>" : a->second;
        const std::string vb = b == expected.end() ? "<missing>" : b->second;
        if (va != vb) {
            throw ConfigError("checkpoint incompatible with config: '" + key + "' is " + va + " in the checkpoint, " +
                              vb + " in the config");
        }
    }
}

std::string archive_to_bytes(torch::serialize::OutputArchive& archive) {
    std::ostringstream out;
    archive.save_to(out);
    return out.str();
}

void archive_from_bytes(torch::serialize::InputArchive& archive, const std::string& bytes) {
    std::istringstream in(bytes);
    archive.load_from(in);
}

}  // namespace fqgan
