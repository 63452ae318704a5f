#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fqgan/config.hpp"
#include "fqgan/data_io.hpp"
#include "fqgan/eval.hpp"
#include "fqgan/quantizer.hpp"
#include "fqgan/teacher.hpp"
#include "fqgan/toy_data.hpp"
#include "fqgan/training.hpp"

namespace fs = std::filesystem;
using namespace fqgan;

namespace {

struct Args {
    std::string config;
    std::vector<std::string> sets;
    std::string data;
    std::string out;
    std::string ckpt;
    std::string cache;
    std::string tokenizer_ckpt;
    std::string resume;
    std::string teacher;
    int class_id = 0;
    int n = 8;
    double cfg = 2.0;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    double val_fraction = -1;
    std::int64_t per_class = 256;
    bool quiet = false;
};

RunConfig config_from(const Args& a) {
    if (a.config.empty()) {
        KeyValues kv;
        apply_overrides(kv, a.sets);
        return run_config_from(kv);
    }
    return load_config(a.config, a.sets);
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) throw std::runtime_error(what + " not found: " + path);
}

int cmd_train_tokenizer(const Args& a) {
    require_file(a.data, "data directory");
    const auto cfg = config_from(a);
    auto data = load_image_folder(a.data, cfg.tokenizer.image_size);
    if (data.skipped > 0) std::cerr << "skipped " << data.skipped << " unreadable files\n";
    TokenizerTrainer trainer(cfg, std::move(data));
    TrainRunOptions opts;
    opts.out_dir = a.out;
    opts.quiet = a.quiet;
    if (!a.resume.empty()) opts.resume = a.resume;
    fs::create_directories(a.out);
    save_config(cfg, fs::path(a.out) / "config.txt");
    train_tokenizer(trainer, opts);
    std::cout << "wrote " << (fs::path(a.out) / "latest.json").string() << "\n";
    return 0;
}

int cmd_eval_tokenizer(const Args& a) {
    require_file(a.ckpt, "checkpoint");
    require_file(a.data, "data directory");
    RunConfig cfg;
    std::int64_t step = 0;
    auto model = load_tokenizer(a.ckpt, &cfg, &step);
    const auto data = load_image_folder(a.data, cfg.tokenizer.image_size);
    EvalOptions opts;
    opts.step = step;
    const fs::path out = a.out.empty() ? fs::path(a.ckpt).parent_path() / "eval" : fs::path(a.out);
    opts.dump_root = out;
    const auto report = evaluate_tokenizer(*model, data, opts);
    fs::create_directories(out);
    const auto csv = out / "eval.csv";
    const bool fresh = !fs::exists(csv);
    std::ofstream f(csv, std::ios::app);
    if (fresh) f << eval_csv_header(cfg.tokenizer.k) << "\n";
    f << eval_csv_row(report) << "\n";
    std::cout << eval_csv_header(cfg.tokenizer.k) << "\n" << eval_csv_row(report) << "\n";
    return 0;
}

int cmd_encode(const Args& a) {
    require_file(a.ckpt, "checkpoint");
    require_file(a.data, "data directory");
    RunConfig cfg;
    auto model = load_tokenizer(a.ckpt, &cfg);
    const auto data = load_image_folder(a.data, cfg.tokenizer.image_size);
    std::vector<FactorizedTokenGrid> grids;
    for (std::int64_t start = 0; start < data.size(); start += 32) {
        const auto end = std::min<std::int64_t>(start + 32, data.size());
        auto part = model->tokenize(data.images.slice(0, start, end));
        for (std::int64_t i = start; i < end; ++i) {
            part[static_cast<std::size_t>(i - start)].class_label = data.labels[static_cast<std::size_t>(i)];
        }
        grids.insert(grids.end(), part.begin(), part.end());
    }
    std::vector<std::uint32_t> sizes(static_cast<std::size_t>(cfg.tokenizer.k),
                                     static_cast<std::uint32_t>(cfg.tokenizer.codebook_size));
    write_token_cache(make_token_cache(std::move(grids), sizes), a.out);
    std::cout << "encoded " << data.size() << " images to " << a.out << "\n";
    return 0;
}

int cmd_train_far(const Args& a) {
    require_file(a.cache, "token cache");
    const auto cfg = config_from(a);
    auto cache = read_token_cache(a.cache);
    TokenCache train = cache;
    std::optional<TokenCache> val;
    const double fraction = a.val_fraction >= 0 ? a.val_fraction : cfg.train.val_fraction;
    if (fraction > 0) {
        auto [tr, va] = split_cache(cache, fraction, cfg.train.seed);
        train = std::move(tr);
        val = std::move(va);
    }
    FarTrainer trainer(cfg, std::move(train));
    TrainRunOptions opts;
    opts.out_dir = a.out;
    opts.quiet = a.quiet;
    if (!a.resume.empty()) opts.resume = a.resume;
    fs::create_directories(a.out);
    save_config(cfg, fs::path(a.out) / "config.txt");
    train_far(trainer, opts);
    if (val && !val->grids.empty()) std::cout << "validation ce " << trainer.evaluate(*val) << "\n";
    std::cout << "wrote " << (fs::path(a.out) / "latest.json").string() << "\n";
    return 0;
}

int cmd_sample(const Args& a) {
    require_file(a.ckpt, "checkpoint");
    RunConfig cfg;
    auto model = load_far(a.ckpt, &cfg);
    if (a.class_id < 0 || a.class_id >= cfg.far.num_classes) {
        throw ConfigError("--class must be in [0, " + std::to_string(cfg.far.num_classes) + ")");
    }
    if (a.n <= 0) throw ConfigError("--n must be positive");
    auto grids = model->sample(std::vector<int>(static_cast<std::size_t>(a.n), a.class_id), a.cfg, a.temperature, a.seed);
    std::vector<std::uint32_t> sizes;
    for (auto s : model->vocab().sizes) sizes.push_back(static_cast<std::uint32_t>(s));
    write_token_cache(make_token_cache(std::move(grids), sizes), a.out);
    std::cout << "sampled " << a.n << " token grids (cfg " << a.cfg << ") to " << a.out << "\n";
    return 0;
}

int cmd_decode(const Args& a) {
    require_file(a.tokenizer_ckpt, "tokenizer checkpoint");
    require_file(a.cache, "token cache");
    RunConfig cfg;
    auto model = load_tokenizer(a.tokenizer_ckpt, &cfg);
    const auto cache = read_token_cache(a.cache);
    if (cache.k != cfg.tokenizer.k || cache.grid_h != cfg.tokenizer.grid_edge()) {
        throw ConfigError("token cache shape does not match the tokenizer");
    }
    fs::create_directories(a.out);
    torch::NoGradGuard guard;
    for (std::size_t start = 0; start < cache.grids.size(); start += 32) {
        const auto end = std::min(start + 32, cache.grids.size());
        const std::vector<FactorizedTokenGrid> part(cache.grids.begin() + static_cast<std::ptrdiff_t>(start),
                                                    cache.grids.begin() + static_cast<std::ptrdiff_t>(end));
        const auto images = model->decode_tokens(part).clamp(-1.0, 1.0);
        for (std::size_t i = start; i < end; ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "img_%05zu.png", i);
            write_png(images[static_cast<std::int64_t>(i - start)], fs::path(a.out) / name);
        }
    }
    std::cout << "decoded " << cache.grids.size() << " images to " << a.out << "\n";
    return 0;
}

int cmd_export_codebook(const Args& a) {
    require_file(a.ckpt, "checkpoint");
    auto model = load_tokenizer(a.ckpt);
    for (const auto& p : export_codebooks(model->codebooks(), a.out)) std::cout << p.string() << "\n";
    return 0;
}

int cmd_precompute_features(const Args& a) {
    require_file(a.data, "data directory");
    const auto cfg = config_from(a);
    const auto& builtins = builtin_teacher_ids();
    if (std::find(builtins.begin(), builtins.end(), a.teacher) == builtins.end()) {
        throw ConfigError("unknown teacher '" + a.teacher + "'");
    }
    TeacherSource src;
    src.id = a.teacher;
    src.kind = TeacherKind::FrozenNetwork;
    src.feature_dim = cfg.tokenizer.teacher_dim;
    src.grid_h = src.grid_w = cfg.tokenizer.teacher_grid;
    const auto data = load_image_folder(a.data, cfg.tokenizer.image_size);
    auto teacher = make_teacher(src);
    precompute_features(*teacher, data.images, data.ids()).write(a.out);
    std::cout << "wrote features for " << data.size() << " images to " << a.out << "\n";
    return 0;
}

int cmd_make_toy_data(const Args& a) {
    const auto cfg = config_from(a);
    write_image_folder(make_toy_dataset(a.per_class, cfg.tokenizer.image_size, a.seed), a.out);
    std::cout << "wrote " << 2 * a.per_class << " images to " << a.out << "\n";
    return 0;
}

void add_config_flags(CLI::App* sub, Args& a) {
    sub->add_option("--config", a.config, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", a.sets, "override a config key (key=value)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Factorized-quantization image tokenizer and factorized autoregressive generator"};
    app.require_subcommand(1);
    Args a;

    auto* train_tok = app.add_subcommand("train-tokenizer", "train the factorized tokenizer");
    add_config_flags(train_tok, a);
    train_tok->add_option("--data", a.data, "image folder")->required();
    train_tok->add_option("--out", a.out, "output directory")->required();
    train_tok->add_option("--resume", a.resume, "checkpoint manifest to resume from");
    train_tok->add_flag("--quiet", a.quiet);

    auto* eval_tok = app.add_subcommand("eval-tokenizer", "evaluate a tokenizer checkpoint");
    eval_tok->add_option("--ckpt", a.ckpt, "tokenizer manifest")->required();
    eval_tok->add_option("--data", a.data, "image folder")->required();
    eval_tok->add_option("--out", a.out, "directory for eval.csv and image dumps");

    auto* encode = app.add_subcommand("encode", "encode an image folder into a token cache");
    encode->add_option("--ckpt", a.ckpt, "tokenizer manifest")->required();
    encode->add_option("--data", a.data, "image folder")->required();
    encode->add_option("--out", a.out, "token cache file")->required();

    auto* train_far_cmd = app.add_subcommand("train-far", "train the autoregressive generator");
    add_config_flags(train_far_cmd, a);
    train_far_cmd->add_option("--cache", a.cache, "token cache")->required();
    train_far_cmd->add_option("--out", a.out, "output directory")->required();
    train_far_cmd->add_option("--resume", a.resume, "checkpoint manifest to resume from");
    train_far_cmd->add_option("--val-fraction", a.val_fraction, "held-out fraction of the cache");
    train_far_cmd->add_flag("--quiet", a.quiet);

    auto* sample = app.add_subcommand("sample", "sample token grids from a generator checkpoint");
    sample->add_option("--ckpt", a.ckpt, "generator manifest")->required();
    sample->add_option("--class", a.class_id, "class id")->required();
    sample->add_option("--n", a.n, "number of samples");
    sample->add_option("--cfg", a.cfg, "guidance scale")->capture_default_str();
    sample->add_option("--temperature", a.temperature, "sampling temperature (0 = argmax)")->capture_default_str();
    sample->add_option("--seed", a.seed, "sampling seed");
    sample->add_option("--out", a.out, "token cache file")->required();

    auto* decode = app.add_subcommand("decode", "decode a token cache to PNG images");
    decode->add_option("--tokenizer-ckpt", a.tokenizer_ckpt, "tokenizer manifest")->required();
    decode->add_option("--cache", a.cache, "token cache")->required();
    decode->add_option("--out", a.out, "output directory")->required();

    auto* export_cb = app.add_subcommand("export-codebook", "write each sub-codebook as CSV");
    export_cb->add_option("--ckpt", a.ckpt, "tokenizer manifest")->required();
    export_cb->add_option("--out", a.out, "output directory")->required();

    auto* precompute = app.add_subcommand("precompute-features", "store teacher features for an image folder");
    add_config_flags(precompute, a);
    precompute->add_option("--teacher", a.teacher, "teacher id")->required();
    precompute->add_option("--data", a.data, "image folder")->required();
    precompute->add_option("--out", a.out, "feature store file")->required();

    auto* toy = app.add_subcommand("make-toy-data", "write the procedural two-class corpus");
    add_config_flags(toy, a);
    toy->add_option("--out", a.out, "output directory")->required();
    toy->add_option("--per-class", a.per_class, "images per class")->capture_default_str();
    toy->add_option("--seed", a.seed, "corpus seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        torch::set_num_threads(std::max(1, static_cast<int>(std::thread::hardware_concurrency())));
        if (app.got_subcommand(train_tok)) return cmd_train_tokenizer(a);
        if (app.got_subcommand(eval_tok)) return cmd_eval_tokenizer(a);
        if (app.got_subcommand(encode)) return cmd_encode(a);
        if (app.got_subcommand(train_far_cmd)) return cmd_train_far(a);
        if (app.got_subcommand(sample)) return cmd_sample(a);
        if (app.got_subcommand(decode)) return cmd_decode(a);
        if (app.got_subcommand(export_cb)) return cmd_export_codebook(a);
        if (app.got_subcommand(precompute)) return cmd_precompute_features(a);
        if (app.got_subcommand(toy)) return cmd_make_toy_data(a);
    } catch (const std::exception& e) {
        std::string msg = e.what();
        if (const auto nl = msg.find('\n'); nl != std::string::npos) msg.resize(nl);
        std::cerr << "error: " << msg << "\n";
        return 1;
    }
    std::cerr << app.help();
    return 2;
}
