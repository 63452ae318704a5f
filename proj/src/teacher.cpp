#include "fqgan/teacher.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "fqgan/binary_io.hpp"

namespace fqgan {

const std::vector<std::string>& builtin_teacher_ids() {
    static const std::vector<std::string> ids = {"clip", "dino"};
    return ids;
}

std::vector<std::optional<TeacherSource>> assignment_plan(const TokenizerConfig& cfg) {
    cfg.validate();
    std::vector<std::optional<TeacherSource>> plan;
    for (const auto& id : cfg.teacher_assignment) {
        if (id.empty()) {
            plan.emplace_back();
            continue;
        }
        TeacherSource src;
        src.id = id;
        src.feature_dim = cfg.teacher_dim;
        src.grid_h = src.grid_w = cfg.teacher_grid;
        if (auto it = cfg.teacher_stores.find(id); it != cfg.teacher_stores.end()) {
            src.kind = TeacherKind::PrecomputedFile;
            src.store_path = it->second;
        } else if (std::find(builtin_teacher_ids().begin(), builtin_teacher_ids().end(), id) !=
                   builtin_teacher_ids().end()) {
            src.kind = TeacherKind::FrozenNetwork;
        } else {
            throw TeacherError("teacher_assignment references unknown teacher '" + id + "'");
        }
        plan.emplace_back(std::move(src));
    }
    return plan;
}

namespace {
constexpr char kMagic[4] = {'F', 'Q', 'T', 'F'};
constexpr std::size_t kHeaderBytes = 4 + 2 + 4 + 2 + 2 + 2;
}  // namespace

void FeatureStore::write(const std::filesystem::path& path) const {
    ByteWriter w;
    w.bytes(kMagic, 4);
    w.u16(kFeatureStoreVersion);
    w.u32(static_cast<std::uint32_t>(features.size()));
    w.u16(static_cast<std::uint16_t>(grid_h));
    w.u16(static_cast<std::uint16_t>(grid_w));
    w.u16(static_cast<std::uint16_t>(dim));
    for (const auto& [id, f] : features) {
        if (f.dim() != 3 || f.size(0) != dim || f.size(1) != grid_h || f.size(2) != grid_w) {
            throw TeacherError("feature map for id " + std::to_string(id) + " does not match the store header");
        }
        w.u64(id);
        // Row-major over the grid, channels innermost.
        const auto hwc = f.to(torch::kFloat).permute({1, 2, 0}).contiguous();
        const auto* p = hwc.data_ptr<float>();
        for (std::int64_t i = 0; i < hwc.numel(); ++i) w.f32(p[i]);
    }
    w.save(path);
}

FeatureStore FeatureStore::read(const std::filesystem::path& path) {
    ByteReader r(read_file(path));
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + ": not a feature store (bad magic)");
    const auto version = r.u16();
    if (version != kFeatureStoreVersion) {
        throw FormatError(path.string() + ": unsupported feature store version " + std::to_string(version));
    }
    FeatureStore s;
    const auto count = r.u32();
    s.grid_h = r.u16();
    s.grid_w = r.u16();
    s.dim = r.u16();
    const std::size_t per_image = static_cast<std::size_t>(s.grid_h) * s.grid_w * s.dim;
    const std::size_t expected = kHeaderBytes + static_cast<std::size_t>(count) * (8 + 4 * per_image);
    if (r.size() != expected) {
        throw FormatError(path.string() + ": file length " + std::to_string(r.size()) + " does not match header (" +
                          std::to_string(expected) + ")");
    }
    for (std::uint32_t n = 0; n < count; ++n) {
        const auto id = r.u64();
        auto t = torch::empty({s.grid_h, s.grid_w, s.dim}, torch::kFloat);
        auto* p = t.data_ptr<float>();
        for (std::size_t i = 0; i < per_image; ++i) {
            p[i] = r.f32();
            if (!std::isfinite(p[i])) throw FormatError(path.string() + ": non-finite feature value");
        }
        if (!s.features.emplace(id, t.permute({2, 0, 1}).contiguous()).second) {
            throw FormatError(path.string() + ": duplicate image id " + std::to_string(id));
        }
    }
    return s;
}

bool FeatureStore::operator==(const FeatureStore& other) const {
    if (grid_h != other.grid_h || grid_w != other.grid_w || dim != other.dim ||
        features.size() != other.features.size()) {
        return false;
    }
    for (const auto& [id, f] : features) {
        auto it = other.features.find(id);
        if (it == other.features.end() || !torch::equal(f, it->second)) return false;
    }
    return true;
}

FrozenNetworkTeacher::FrozenNetworkTeacher(TeacherSource source) : source_(std::move(source)) {
    if (source_.feature_dim < 1) throw TeacherError("teacher feature_dim must be >= 1");
    net_ = FrozenConvNet(stable_hash(source_.id), std::vector<int>{16, 32, source_.feature_dim});
}

torch::Tensor FrozenNetworkTeacher::features(const torch::Tensor& images, const std::vector<std::uint64_t>&) {
    torch::NoGradGuard guard;
    auto f = net_->forward(images);
    return torch::adaptive_avg_pool2d(f, {source_.grid_h, source_.grid_w});
}

PrecomputedTeacher::PrecomputedTeacher(TeacherSource source, FeatureStore store)
    : source_(std::move(source)), store_(std::move(store)) {
    if (store_.dim != source_.feature_dim) {
        throw TeacherError("teacher '" + source_.id + "': store dim " + std::to_string(store_.dim) +
                           " differs from declared feature_dim " + std::to_string(source_.feature_dim));
    }
    source_.grid_h = store_.grid_h;
    source_.grid_w = store_.grid_w;
}

PrecomputedTeacher::PrecomputedTeacher(TeacherSource source)
    : PrecomputedTeacher(source, FeatureStore::read(source.store_path)) {}

torch::Tensor PrecomputedTeacher::features(const torch::Tensor&, const std::vector<std::uint64_t>& ids) {
    std::vector<torch::Tensor> out;
    out.reserve(ids.size());
    for (auto id : ids) {
        auto it = store_.features.find(id);
        if (it == store_.features.end()) {
            throw TeacherError("teacher '" + source_.id + "': no features for image id " + std::to_string(id));
        }
        out.push_back(it->second);
    }
    if (out.empty()) return torch::empty({0, store_.dim, store_.grid_h, store_.grid_w});
    return torch::stack(out);
}

std::unique_ptr<Teacher> make_teacher(const TeacherSource& source) {
    if (source.kind == TeacherKind::PrecomputedFile) return std::make_unique<PrecomputedTeacher>(source);
    return std::make_unique<FrozenNetworkTeacher>(source);
}

torch::Tensor align_to_grid(const torch::Tensor& feats, int grid_h, int grid_w) {
    if (feats.dim() != 4) throw TeacherError("align_to_grid expects (N, C, h, w)");
    if (grid_h < 1 || grid_w < 1) throw TeacherError("align_to_grid: target grid must be at least 1x1");
    if (feats.size(2) == grid_h && feats.size(3) == grid_w) return feats;
    namespace F = torch::nn::functional;
    return F::interpolate(feats, F::InterpolateFuncOptions()
                                     .size(std::vector<std::int64_t>{grid_h, grid_w})
                                     .mode(torch::kBilinear)
                                     .align_corners(false));
}

FeatureStore precompute_features(Teacher& teacher, const torch::Tensor& images, const std::vector<std::uint64_t>& ids,
                                 int chunk) {
    if (images.size(0) != static_cast<std::int64_t>(ids.size())) {
        throw TeacherError("precompute_features: one id per image required");
    }
    FeatureStore store;
    store.dim = teacher.source().feature_dim;
    store.grid_h = teacher.source().grid_h;
    store.grid_w = teacher.source().grid_w;
    for (std::int64_t start = 0; start < images.size(0); start += chunk) {
        const auto end = std::min<std::int64_t>(start + chunk, images.size(0));
        const std::vector<std::uint64_t> chunk_ids(ids.begin() + start, ids.begin() + end);
        const auto f = teacher.features(images.slice(0, start, end), chunk_ids);
        for (std::int64_t i = 0; i < f.size(0); ++i) {
            store.features[chunk_ids[static_cast<std::size_t>(i)]] = f[i].contiguous();
        }
    }
    return store;
}

}  // namespace fqgan
