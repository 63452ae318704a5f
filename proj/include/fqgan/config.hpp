#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fqgan {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat `key = value` document; `#` starts a comment.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

/// Applies `key=value` overrides (as given to `--set`) on top of a document.
void apply_overrides(KeyValues& kv, const std::vector<std::string>& overrides);

enum class HeadVariant { FactorizedAr, KLinear, KMlp };

std::string to_string(HeadVariant v);
HeadVariant head_variant_from_string(const std::string& s);

struct TokenizerConfig {
    int k = 2;
    int codebook_size = 256;
    int code_dim = 8;
    int downsample_ratio = 8;
    int image_size = 64;
    double lambda_disentangle = 0.1;
    double lambda_rep = 0.5;
    // Entry i is the teacher id supervising sub-codebook i+1, empty for none.
    std::vector<std::string> teacher_assignment = {"", "clip"};
    double commitment_beta = 0.25;
    std::int64_t gan_start_step = 1000;

    double perceptual_weight = 1.0;
    double gan_weight = 0.1;
    int base_channels = 32;
    int res_blocks = 2;
    int disc_channels = 32;
    bool codebook_l2_norm = true;
    int teacher_dim = 32;
    int teacher_grid = 4;
    // teacher id -> precomputed feature store path; ids absent here use the frozen network.
    std::map<std::string, std::string> teacher_stores;

    int grid_edge() const { return image_size / downsample_ratio; }
    int num_patches() const { return grid_edge() * grid_edge(); }
    int num_stages() const;

    void validate() const;
    bool operator==(const TokenizerConfig&) const = default;
};

struct FarConfig {
    int backbone_layers = 4;
    int head_layers = 2;
    int width = 128;
    int heads = 4;
    int num_classes = 2;
    double class_dropout_prob = 0.1;
    double cfg_scale = 2.0;
    HeadVariant head_variant = HeadVariant::FactorizedAr;
    int mlp_hidden = 256;
    double dropout = 0.0;

    void validate() const;
    bool operator==(const FarConfig&) const = default;
};

struct TrainConfig {
    int batch_size = 32;
    double learning_rate = 1e-4;
    std::int64_t max_steps = 1000;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 500;
    std::int64_t eval_every = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double tokenizer_grad_clip = 0.0;
    double far_grad_clip = 1.0;
    double val_fraction = 0.0;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

/// Each parser consumes only its own keys; unknown keys are rejected by load_config.
TokenizerConfig tokenizer_config_from(const KeyValues& kv);
FarConfig far_config_from(const KeyValues& kv);
TrainConfig train_config_from(const KeyValues& kv);

KeyValues to_key_values(const TokenizerConfig& c);
KeyValues to_key_values(const FarConfig& c);
KeyValues to_key_values(const TrainConfig& c);

struct RunConfig {
    TokenizerConfig tokenizer;
    FarConfig far;
    TrainConfig train;

    bool operator==(const RunConfig&) const = default;
};

RunConfig run_config_from(const KeyValues& kv);
KeyValues to_key_values(const RunConfig& c);

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
void save_config(const RunConfig& c, const std::filesystem::path& path);

}  // namespace fqgan
