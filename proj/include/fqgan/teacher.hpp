#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "fqgan/binary_io.hpp"
#include "fqgan/config.hpp"
#include "fqgan/frozen_net.hpp"

namespace fqgan {

struct TeacherError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class TeacherKind { PrecomputedFile, FrozenNetwork };

struct TeacherSource {
    std::string id;
    TeacherKind kind = TeacherKind::FrozenNetwork;
    int feature_dim = 32;
    int grid_h = 4;
    int grid_w = 4;
    std::filesystem::path store_path;  // PrecomputedFile only

    bool operator==(const TeacherSource&) const = default;
};

/// Teacher ids that resolve to a seeded frozen network without any store.
const std::vector<std::string>& builtin_teacher_ids();

/// Branch i (0-based) -> teacher supervising sub-codebook i+1, or nullopt for a visual branch.
std::vector<std::optional<TeacherSource>> assignment_plan(const TokenizerConfig& cfg);

/// In-memory image of a precomputed feature file (magic FQTF). Features are kept as
/// (dim, grid_h, grid_w) float tensors keyed by image id.
struct FeatureStore {
    int grid_h = 0;
    int grid_w = 0;
    int dim = 0;
    std::map<std::uint64_t, torch::Tensor> features;

    void write(const std::filesystem::path& path) const;
    static FeatureStore read(const std::filesystem::path& path);
    bool operator==(const FeatureStore& other) const;
};

inline constexpr std::uint16_t kFeatureStoreVersion = 1;

/// Frozen provider of per-image native-grid feature maps, (N, dim, grid_h, grid_w).
class Teacher {
public:
    virtual ~Teacher() = default;
    virtual const TeacherSource& source() const = 0;
    /// `images` is (N, 3, H, W) in [-1, 1]; `ids` has N entries. A teacher may use either.
    virtual torch::Tensor features(const torch::Tensor& images, const std::vector<std::uint64_t>& ids) = 0;
};

class FrozenNetworkTeacher final : public Teacher {
public:
    explicit FrozenNetworkTeacher(TeacherSource source);
    const TeacherSource& source() const override { return source_; }
    torch::Tensor features(const torch::Tensor& images, const std::vector<std::uint64_t>& ids) override;

    /// The frozen network's parameters; none of them require gradients.
    std::vector<torch::Tensor> parameters() const { return net_->parameters(); }

private:
    TeacherSource source_;
    FrozenConvNet net_{nullptr};
};

class PrecomputedTeacher final : public Teacher {
public:
    PrecomputedTeacher(TeacherSource source, FeatureStore store);
    explicit PrecomputedTeacher(TeacherSource source);
    const TeacherSource& source() const override { return source_; }
    torch::Tensor features(const torch::Tensor& images, const std::vector<std::uint64_t>& ids) override;

private:
    TeacherSource source_;
    FeatureStore store_;
};

std::unique_ptr<Teacher> make_teacher(const TeacherSource& source);

/// Bilinear resize over the spatial axes of (N, C, h, w); returns the input itself when shapes match.
torch::Tensor align_to_grid(const torch::Tensor& feats, int grid_h, int grid_w);

/// Runs `teacher` over `images` in chunks and collects the result as a store keyed by `ids`.
FeatureStore precompute_features(Teacher& teacher, const torch::Tensor& images, const std::vector<std::uint64_t>& ids,
                                 int chunk = 64);

}  // namespace fqgan
