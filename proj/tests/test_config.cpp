#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "fqgan/config.hpp"

using namespace fqgan;

namespace {

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST(Config, DualPresetIsValid) {
    KeyValues kv{{"k", "2"}, {"codebook_size", "16384"}, {"code_dim", "8"},
                 {"lambda_disentangle", "0.1"}, {"lambda_rep", "0.5"}};
    const auto cfg = run_config_from(kv);
    EXPECT_NO_THROW(cfg.tokenizer.validate());
    EXPECT_EQ(cfg.tokenizer.k, 2);
    EXPECT_EQ(cfg.tokenizer.codebook_size, 16384);
    EXPECT_DOUBLE_EQ(cfg.tokenizer.lambda_disentangle, 0.1);
    EXPECT_DOUBLE_EQ(cfg.tokenizer.lambda_rep, 0.5);
}

TEST(Config, DegenerateSingleCodebookIsValid) {
    const auto cfg = run_config_from({{"k", "1"}, {"codebook_size", "16"}, {"code_dim", "4"}});
    EXPECT_NO_THROW(cfg.tokenizer.validate());
    EXPECT_EQ(cfg.tokenizer.teacher_assignment.size(), 1u);
}

TEST(Config, IndivisibleImageSizeIsRejected) {
    const auto msg = error_of([] { run_config_from({{"image_size", "65"}, {"downsample_ratio", "16"}}); });
    EXPECT_NE(msg.find("image_size not divisible"), std::string::npos) << msg;
}

TEST(Config, DeskDefaults) {
    const RunConfig cfg;
    EXPECT_EQ(cfg.tokenizer.image_size, 64);
    EXPECT_EQ(cfg.tokenizer.downsample_ratio, 8);
    EXPECT_EQ(cfg.tokenizer.grid_edge(), 8);
    EXPECT_EQ(cfg.tokenizer.k, 2);
    EXPECT_EQ(cfg.tokenizer.codebook_size, 256);
    EXPECT_EQ(cfg.tokenizer.code_dim, 8);
    EXPECT_EQ(cfg.train.batch_size, 32);
    EXPECT_DOUBLE_EQ(cfg.train.learning_rate, 1e-4);
    EXPECT_DOUBLE_EQ(cfg.tokenizer.commitment_beta, 0.25);
    EXPECT_EQ(cfg.tokenizer.gan_start_step, 1000);
    EXPECT_DOUBLE_EQ(cfg.far.class_dropout_prob, 0.1);
    EXPECT_DOUBLE_EQ(cfg.far.cfg_scale, 2.0);
    EXPECT_EQ(cfg.far.backbone_layers, 4);
    EXPECT_EQ(cfg.far.head_layers, 2);
    EXPECT_EQ(cfg.far.width, 128);
    EXPECT_EQ(cfg.far.heads, 4);
}

TEST(Config, ParserHandlesCommentsAndWhitespace) {
    const auto kv = parse_key_values("# header\n  k = 3   # trailing\n\ncodebook_size=64\n");
    EXPECT_EQ(kv.at("k"), "3");
    EXPECT_EQ(kv.at("codebook_size"), "64");
    EXPECT_EQ(kv.size(), 2u);
}

TEST(Config, ParserRejectsMalformedLinesAndDuplicates) {
    EXPECT_THROW(parse_key_values("k 3\n"), ConfigError);
    EXPECT_THROW(parse_key_values("k = 3\nk = 4\n"), ConfigError);
}

TEST(Config, UnknownKeyIsRejected) {
    const auto msg = error_of([] { run_config_from({{"kk", "2"}}); });
    EXPECT_NE(msg.find("kk"), std::string::npos);
}

TEST(Config, OverridesApply) {
    KeyValues kv{{"k", "2"}};
    apply_overrides(kv, {"k=3", "batch_size=4"});
    EXPECT_EQ(kv.at("k"), "3");
    EXPECT_EQ(kv.at("batch_size"), "4");
    EXPECT_THROW(apply_overrides(kv, {"novalue"}), ConfigError);
}

TEST(Config, DefaultTeacherAssignmentFollowsK) {
    EXPECT_EQ(run_config_from({{"k", "1"}}).tokenizer.teacher_assignment, (std::vector<std::string>{""}));
    EXPECT_EQ(run_config_from({{"k", "2"}}).tokenizer.teacher_assignment, (std::vector<std::string>{"", "clip"}));
    EXPECT_EQ(run_config_from({{"k", "3"}}).tokenizer.teacher_assignment,
              (std::vector<std::string>{"", "dino", "clip"}));
}

// Every invariant violation is rejected with a message naming its key.
TEST(Config, RejectionIsTotalAndKeySpecific) {
    const std::vector<std::pair<std::string, std::string>> bad = {
        {"k", "0"},
        {"codebook_size", "1"},
        {"code_dim", "0"},
        {"downsample_ratio", "6"},
        {"lambda_disentangle", "-0.1"},
        {"lambda_rep", "-1"},
        {"commitment_beta", "-1"},
        {"gan_start_step", "-5"},
        {"base_channels", "12"},
        {"width", "130"},
        {"heads", "0"},
        {"backbone_layers", "0"},
        {"class_dropout_prob", "1"},
        {"cfg_scale", "-1"},
        {"batch_size", "0"},
        {"learning_rate", "0"},
        {"adam_beta2", "1"},
        {"val_fraction", "1"},
        {"head_variant", "transformer"},
        {"k", "two"},
    };
    for (const auto& [key, value] : bad) {
        const auto msg = error_of([&] {
            const auto cfg = run_config_from({{key, value}});
            cfg.tokenizer.validate();
            cfg.far.validate();
            cfg.train.validate();
        });
        EXPECT_FALSE(msg.empty()) << key << "=" << value << " was accepted";
        EXPECT_NE(msg.find(key), std::string::npos) << msg;
    }
    const auto msg = error_of([] {
        run_config_from({{"k", "2"}, {"teacher_assignment", "none,clip,dino"}}).tokenizer.validate();
    });
    EXPECT_NE(msg.find("teacher_assignment"), std::string::npos);
    const auto msg2 = error_of([] {
        run_config_from({{"head_variant", "factorized_ar"}, {"head_layers", "0"}}).far.validate();
    });
    EXPECT_NE(msg2.find("head_layers"), std::string::npos);
}

TEST(Config, RoundTripRandomConfigs) {
    std::mt19937_64 rng(11);
    const auto tmp = std::filesystem::temp_directory_path() / "fqgan_config_roundtrip.txt";
    for (int trial = 0; trial < 100; ++trial) {
        RunConfig c;
        std::uniform_int_distribution<int> small(1, 4);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        c.tokenizer.k = small(rng);
        c.tokenizer.codebook_size = 2 + static_cast<int>(rng() % 5000);
        c.tokenizer.code_dim = small(rng) * 3;
        c.tokenizer.downsample_ratio = 1 << small(rng);
        c.tokenizer.image_size = c.tokenizer.downsample_ratio * small(rng);
        c.tokenizer.lambda_disentangle = unit(rng);
        c.tokenizer.lambda_rep = unit(rng) * 3;
        c.tokenizer.teacher_assignment.assign(static_cast<std::size_t>(c.tokenizer.k), "");
        if (c.tokenizer.k > 1) c.tokenizer.teacher_assignment.back() = trial % 2 ? "clip" : "dino";
        c.tokenizer.commitment_beta = unit(rng) / 3.0;
        c.tokenizer.codebook_l2_norm = trial % 3 == 0;
        if (trial % 5 == 0) c.tokenizer.teacher_stores["clip"] = "/tmp/feats_" + std::to_string(trial) + ".bin";
        c.far.width = 32 * small(rng);
        c.far.heads = 4;
        c.far.head_variant = static_cast<HeadVariant>(trial % 3);
        c.far.class_dropout_prob = unit(rng) * 0.5;
        c.far.cfg_scale = unit(rng) * 4;
        c.train.learning_rate = unit(rng) * 1e-3 + 1e-9;
        c.train.seed = rng();
        c.train.max_steps = static_cast<std::int64_t>(rng() % 100000);
        ASSERT_NO_THROW(c.tokenizer.validate());
        save_config(c, tmp);
        const auto back = load_config(tmp);
        ASSERT_EQ(back, c) << format_key_values(to_key_values(c));
    }
    std::filesystem::remove(tmp);
}

TEST(Config, HeadVariantNames) {
    for (auto v : {HeadVariant::FactorizedAr, HeadVariant::KLinear, HeadVariant::KMlp}) {
        EXPECT_EQ(head_variant_from_string(to_string(v)), v);
    }
    EXPECT_EQ(to_string(HeadVariant::KLinear), "k_linear");
    EXPECT_EQ(to_string(HeadVariant::KMlp), "k_mlp");
    EXPECT_EQ(to_string(HeadVariant::FactorizedAr), "factorized_ar");
}

TEST(Config, ShippedPresetsLoad) {
    const std::filesystem::path dir = FQGAN_CONFIG_DIR;
    int loaded = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.path().extension() != ".txt") continue;
        EXPECT_NO_THROW(load_config(e.path())) << e.path();
        ++loaded;
    }
    EXPECT_GE(loaded, 6);
    const auto triple = load_config(dir / "fqgan_triple.txt");
    EXPECT_EQ(triple.tokenizer.k, 3);
    EXPECT_EQ(triple.tokenizer.grid_edge(), 16);
    EXPECT_EQ(triple.tokenizer.teacher_assignment, (std::vector<std::string>{"", "dino", "clip"}));
    const auto large = load_config(dir / "far_large.txt");
    EXPECT_EQ(large.far.backbone_layers, 36);
    EXPECT_EQ(large.far.head_layers, 4);
    EXPECT_EQ(large.far.width, 1280);
    EXPECT_EQ(large.far.heads, 20);
    const auto base = load_config(dir / "far_base.txt");
    EXPECT_EQ(base.far.backbone_layers, 24);
    EXPECT_EQ(base.far.head_layers, 3);
    EXPECT_EQ(base.far.width, 1024);
    EXPECT_EQ(base.far.heads, 16);
}
