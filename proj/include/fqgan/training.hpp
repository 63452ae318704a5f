#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "fqgan/config.hpp"
#include "fqgan/data_io.hpp"
#include "fqgan/far.hpp"
#include "fqgan/losses.hpp"
#include "fqgan/teacher.hpp"
#include "fqgan/tokenizer_net.hpp"

namespace fqgan {

/// Dataset positions consumed at `step`: a fresh seeded permutation per epoch, independent of
/// any training state so resumed runs see the same batches.
std::vector<std::int64_t> batch_indices(std::int64_t step, int batch_size, std::int64_t dataset_size,
                                        std::uint64_t seed);

struct TrainBatch {
    std::vector<std::int64_t> indices;
    torch::Tensor images;
};

/// Generator/discriminator optimisation of the factorized tokenizer.
class TokenizerTrainer {
public:
    TokenizerTrainer(RunConfig cfg, ImageDataset data);

    TrainBatch make_batch(std::int64_t step) const;

    /// One generator update on the weighted total, then one discriminator update once the
    /// adversarial term is active. Throws LossError naming a non-finite term.
    LossReport step();
    LossReport step(const TrainBatch& batch);
    /// Loss terms for a batch without updating anything.
    LossReport measure(const torch::Tensor& images, const std::vector<std::int64_t>& indices);

    std::int64_t current_step() const { return step_; }
    const RunConfig& config() const { return cfg_; }
    FactorizedTokenizer& model() { return model_; }
    PatchDiscriminator& discriminator() { return disc_; }
    const ImageDataset& data() const { return data_; }

    std::vector<torch::Tensor> generator_parameters() const;
    std::vector<torch::Tensor> discriminator_parameters() const;
    std::vector<torch::Tensor> teacher_parameters() const;

    /// Aligned teacher targets for branch `branch` (1-based), (N, dim, g, g) over the dataset.
    torch::Tensor teacher_targets(int branch) const;

    CheckpointManifest save(const std::filesystem::path& manifest_path);
    /// Restores weights, optimiser moments, step and RNG state from a checkpoint whose config
    /// is compatible with ours.
    void resume(const std::filesystem::path& manifest_path);

private:
    struct Terms;
    Terms compute(const torch::Tensor& images, const std::vector<std::int64_t>& indices, bool need_grad);

    RunConfig cfg_;
    ImageDataset data_;
    LossWeights weights_;
    FactorizedTokenizer model_{nullptr};
    PatchDiscriminator disc_{nullptr};
    PerceptualProxy perceptual_{nullptr};
    std::vector<std::unique_ptr<Teacher>> teachers_;  // by branch, null where unassigned
    std::vector<torch::Tensor> targets_;              // by branch, undefined where unassigned
    std::unique_ptr<torch::optim::Adam> opt_g_;
    std::unique_ptr<torch::optim::Adam> opt_d_;
    std::int64_t step_ = 0;
};

/// Keys that must agree between a tokenizer checkpoint and the config it is loaded into.
const std::vector<std::string>& tokenizer_shape_keys();
const std::vector<std::string>& far_shape_keys();

/// Loads a tokenizer checkpoint (config taken from the manifest snapshot) in eval mode.
FactorizedTokenizer load_tokenizer(const std::filesystem::path& manifest_path, RunConfig* cfg_out = nullptr,
                                   std::int64_t* step_out = nullptr);

/// Teacher-forced cross-entropy training of a FAR model on a token cache.
class FarTrainer {
public:
    FarTrainer(RunConfig cfg, TokenCache train);

    struct Batch {
        torch::Tensor classes;
        torch::Tensor tokens;
    };
    Batch make_batch(std::int64_t step) const;

    double step();
    double step(const Batch& batch);
    /// Mean per-position summed cross-entropy, no class dropout, eval mode.
    double evaluate(const TokenCache& cache, int batch_size = 64);

    std::int64_t current_step() const { return step_; }
    FarModel& model() { return model_; }
    const RunConfig& config() const { return cfg_; }

    CheckpointManifest save(const std::filesystem::path& manifest_path);
    void resume(const std::filesystem::path& manifest_path);

private:
    RunConfig cfg_;
    TokenCache train_;
    torch::Tensor tokens_;
    torch::Tensor labels_;
    FarModel model_{nullptr};
    std::unique_ptr<torch::optim::Adam> opt_;
    std::int64_t step_ = 0;
};

FarVocab vocab_of(const TokenCache& cache);
/// Loads a FAR checkpoint in eval mode.
FarModel load_far(const std::filesystem::path& manifest_path, RunConfig* cfg_out = nullptr);

/// Per-step observer; return false to stop early.
using TokenizerObserver = std::function<bool(const LossReport&, TokenizerTrainer&)>;
using FarObserver = std::function<bool(std::int64_t step, double loss, FarTrainer&)>;

struct TrainRunOptions {
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume;
    bool quiet = false;
};

/// Full loop with metrics CSV (`metrics.csv`), periodic checkpoints (`ckpt_<step>.json`) and a
/// final `latest.json`. Uses a bounded prefetch queue for batches.
void train_tokenizer(TokenizerTrainer& trainer, const TrainRunOptions& opts, const TokenizerObserver& observer = {});
void train_far(FarTrainer& trainer, const TrainRunOptions& opts, const FarObserver& observer = {});

/// Splits a cache into (train, validation) with the last `fraction` of a seeded permutation held out.
std::pair<TokenCache, TokenCache> split_cache(const TokenCache& cache, double fraction, std::uint64_t seed);

}  // namespace fqgan
