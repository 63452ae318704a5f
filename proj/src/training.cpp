#include "fqgan/training.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <mutex>

#include "fqgan/eval.hpp"
#include "fqgan/prefetch.hpp"

namespace fqgan {

namespace {

constexpr std::uint64_t kEpochMix = 0x9E3779B97F4A7C15ULL;

torch::optim::Adam make_adam(std::vector<torch::Tensor> params, const TrainConfig& t) {
    return torch::optim::Adam(std::move(params), torch::optim::AdamOptions(t.learning_rate)
                                                     .betas({t.adam_beta1, t.adam_beta2})
                                                     .weight_decay(0.0));
}

torch::Tensor rng_state() {
    auto gen = at::detail::getDefaultCPUGenerator();
    std::lock_guard<std::mutex> lock(gen.mutex());
    return gen.get_state();
}

void set_rng_state(const torch::Tensor& state) {
    auto gen = at::detail::getDefaultCPUGenerator();
    std::lock_guard<std::mutex> lock(gen.mutex());
    gen.set_state(state);
}

double scalar(const torch::Tensor& t) { return t.defined() ? t.detach().to(torch::kDouble).item<double>() : 0.0; }

std::ofstream open_metrics(const std::filesystem::path& path, const std::string& header, bool append) {
    const bool exists = std::filesystem::exists(path);
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    if (!append || !exists) out << header << "\n";
    return out;
}

}  // namespace

std::vector<std::int64_t> batch_indices(std::int64_t step, int batch_size, std::int64_t dataset_size,
                                        std::uint64_t seed) {
    if (dataset_size <= 0) throw std::invalid_argument("batch_indices: empty dataset");
    std::vector<std::int64_t> out;
    out.reserve(static_cast<std::size_t>(batch_size));
    std::int64_t cached_epoch = -1;
    std::vector<std::int64_t> perm;
    for (int j = 0; j < batch_size; ++j) {
        const std::int64_t pos = step * batch_size + j;
        const std::int64_t epoch = pos / dataset_size;
        if (epoch != cached_epoch) {
            perm = shuffled_order(dataset_size, seed * kEpochMix + static_cast<std::uint64_t>(epoch));
            cached_epoch = epoch;
        }
        out.push_back(perm[static_cast<std::size_t>(pos % dataset_size)]);
    }
    return out;
}

// ---- tokenizer ----

struct TokenizerTrainer::Terms {
    torch::Tensor total;
    torch::Tensor reconstruction;
    LossParts parts;
};

TokenizerTrainer::TokenizerTrainer(RunConfig cfg, ImageDataset data)
    : cfg_(std::move(cfg)), data_(std::move(data)), weights_(LossWeights::from(cfg_.tokenizer)) {
    cfg_.tokenizer.validate();
    cfg_.train.validate();
    if (data_.size() == 0) throw std::invalid_argument("tokenizer training needs a non-empty dataset");
    const auto& tc = cfg_.tokenizer;
    if (data_.images.size(2) != tc.image_size || data_.images.size(3) != tc.image_size) {
        throw std::invalid_argument("dataset images are not " + std::to_string(tc.image_size) + " pixels");
    }
    torch::manual_seed(cfg_.train.seed);
    model_ = FactorizedTokenizer(tc);
    disc_ = PatchDiscriminator(tc);
    perceptual_ = PerceptualProxy();

    const auto plan = assignment_plan(tc);
    teachers_.resize(plan.size());
    targets_.resize(plan.size());
    const auto ids = data_.ids();
    for (std::size_t i = 0; i < plan.size(); ++i) {
        if (!plan[i]) continue;
        teachers_[i] = make_teacher(*plan[i]);
        const auto store = precompute_features(*teachers_[i], data_.images, ids);
        std::vector<torch::Tensor> feats;
        for (auto id : ids) feats.push_back(store.features.at(id));
        targets_[i] = align_to_grid(torch::stack(feats), tc.grid_edge(), tc.grid_edge()).contiguous();
    }

    opt_g_ = std::make_unique<torch::optim::Adam>(make_adam(model_->parameters(), cfg_.train));
    opt_d_ = std::make_unique<torch::optim::Adam>(make_adam(disc_->parameters(), cfg_.train));
}

TrainBatch TokenizerTrainer::make_batch(std::int64_t step) const {
    TrainBatch b;
    b.indices = batch_indices(step, cfg_.train.batch_size, data_.size(), cfg_.train.seed);
    b.images = data_.images.index_select(0, torch::tensor(b.indices, torch::kLong));
    return b;
}

std::vector<torch::Tensor> TokenizerTrainer::generator_parameters() const { return model_->parameters(); }
std::vector<torch::Tensor> TokenizerTrainer::discriminator_parameters() const { return disc_->parameters(); }

std::vector<torch::Tensor> TokenizerTrainer::teacher_parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& t : teachers_) {
        if (auto* net = dynamic_cast<const FrozenNetworkTeacher*>(t.get())) {
            for (auto& p : net->parameters()) out.push_back(p);
        }
    }
    for (auto& p : perceptual_->parameters()) out.push_back(p);
    return out;
}

torch::Tensor TokenizerTrainer::teacher_targets(int branch) const {
    if (branch < 1 || branch > static_cast<int>(targets_.size())) throw std::out_of_range("branch out of range");
    return targets_[static_cast<std::size_t>(branch - 1)];
}

TokenizerTrainer::Terms TokenizerTrainer::compute(const torch::Tensor& images, const std::vector<std::int64_t>& indices,
                                                  bool need_grad) {
    const auto& tc = cfg_.tokenizer;
    torch::AutoGradMode grad_mode(need_grad);
    Terms t;
    TokenizerForward fwd;
    try {
        fwd = model_->forward(images);
    } catch (const QuantizerError&) {
        throw LossError("non-finite loss term: encoder");
    }
    t.reconstruction = fwd.reconstruction;
    const int k = tc.k;

    torch::Tensor vq;
    for (int i = 0; i < k; ++i) {
        const auto h = map_to_rows(fwd.features[static_cast<std::size_t>(i)]);
        const auto term = vq_commit_loss(h, fwd.quantization.maps[static_cast<std::size_t>(i)], tc.commitment_beta);
        vq = vq.defined() ? vq + term : term;
    }
    const auto rec = rec_loss(images, fwd.reconstruction);
    torch::Tensor total = rec + vq;
    t.parts.rec = scalar(rec);
    t.parts.vq = scalar(vq);

    {
        torch::Tensor perc;
        if (weights_.perceptual_weight > 0) {
            perc = perceptual_->forward(images, fwd.reconstruction);
            total = total + weights_.perceptual_weight * perc;
        } else {
            torch::NoGradGuard ng;
            perc = perceptual_->forward(images, fwd.reconstruction);
        }
        t.parts.perceptual = scalar(perc);
    }

    if (step_ >= tc.gan_start_step) {
        torch::Tensor gen;
        if (weights_.gan_weight > 0) {
            gen = hinge_generator_loss(disc_->forward(fwd.reconstruction));
            total = total + weights_.gan_weight * gen;
        } else {
            torch::NoGradGuard ng;
            gen = hinge_generator_loss(disc_->forward(fwd.reconstruction));
        }
        t.parts.gan_generator = scalar(gen);
    }

    if (k >= 2) {
        std::vector<torch::Tensor> rows;
        for (const auto& s : fwd.straight) rows.push_back(map_to_rows(s));
        torch::Tensor dis;
        if (weights_.lambda_disentangle > 0) {
            dis = disentangle_loss(rows);
            total = total + weights_.lambda_disentangle * dis;
        } else {
            torch::NoGradGuard ng;
            dis = disentangle_loss(rows);
        }
        t.parts.disentangle = scalar(dis);
    }

    const auto index = torch::tensor(indices, torch::kLong);
    torch::Tensor rep;
    for (int b = 1; b <= k; ++b) {
        const auto& target_all = targets_[static_cast<std::size_t>(b - 1)];
        if (!target_all.defined()) continue;
        const auto target = target_all.index_select(0, index);
        torch::Tensor term;
        if (weights_.lambda_rep > 0) {
            term = rep_loss(model_->predict_teacher(b, fwd.straight[static_cast<std::size_t>(b - 1)]), target);
        } else {
            torch::NoGradGuard ng;
            term = rep_loss(model_->predict_teacher(b, fwd.straight[static_cast<std::size_t>(b - 1)]), target);
        }
        rep = rep.defined() ? rep + term : term;
    }
    if (rep.defined()) {
        if (weights_.lambda_rep > 0) total = total + weights_.lambda_rep * rep;
        t.parts.rep = scalar(rep);
    }
    t.total = total;
    return t;
}

LossReport TokenizerTrainer::measure(const torch::Tensor& images, const std::vector<std::int64_t>& indices) {
    auto terms = compute(images, indices, false);
    return total_loss(terms.parts, weights_, step_);
}

LossReport TokenizerTrainer::step() { return step(make_batch(step_)); }

LossReport TokenizerTrainer::step(const TrainBatch& batch) {
    model_->train();
    disc_->train();
    opt_g_->zero_grad();
    auto terms = compute(batch.images, batch.indices, true);
    auto report = total_loss(terms.parts, weights_, step_);
    terms.total.backward();
    if (cfg_.train.tokenizer_grad_clip > 0) {
        torch::nn::utils::clip_grad_norm_(model_->parameters(), cfg_.train.tokenizer_grad_clip);
    }
    opt_g_->step();

    if (step_ >= cfg_.tokenizer.gan_start_step) {
        opt_d_->zero_grad();
        const auto real = disc_->forward(batch.images);
        const auto fake = disc_->forward(terms.reconstruction.detach());
        const auto d_loss = gan_losses(real, fake).discriminator;
        const double d = scalar(d_loss);
        if (!std::isfinite(d)) throw LossError("non-finite loss term: gan_discriminator");
        d_loss.backward();
        opt_d_->step();
        report.gan_discriminator = d;
    }
    ++step_;
    return report;
}

const std::vector<std::string>& tokenizer_shape_keys() {
    static const std::vector<std::string> keys = {
        "k", "codebook_size", "code_dim", "downsample_ratio", "image_size", "base_channels", "res_blocks",
        "disc_channels", "codebook_l2_norm", "teacher_dim", "teacher_assignment"};
    return keys;
}

const std::vector<std::string>& far_shape_keys() {
    static const std::vector<std::string> keys = {"backbone_layers", "head_layers", "width", "heads",
                                                  "num_classes", "head_variant", "mlp_hidden"};
    return keys;
}

CheckpointManifest TokenizerTrainer::save(const std::filesystem::path& manifest_path) {
    torch::serialize::OutputArchive root;
    torch::serialize::OutputArchive model_ar, disc_ar, opt_g_ar, opt_d_ar;
    model_->save(model_ar);
    disc_->save(disc_ar);
    opt_g_->save(opt_g_ar);
    opt_d_->save(opt_d_ar);
    root.write("model", model_ar);
    root.write("disc", disc_ar);
    root.write("opt_g", opt_g_ar);
    root.write("opt_d", opt_d_ar);
    root.write("rng", rng_state());

    CheckpointManifest m;
    m.kind = "tokenizer";
    m.config = to_key_values(cfg_);
    m.step = step_;
    return save_checkpoint(manifest_path, m, archive_to_bytes(root));
}

void TokenizerTrainer::resume(const std::filesystem::path& manifest_path) {
    const auto ck = load_checkpoint(manifest_path);
    if (ck.manifest.kind != "tokenizer") throw ConfigError("checkpoint is not a tokenizer checkpoint");
    require_compatible(ck.manifest.config, to_key_values(cfg_), tokenizer_shape_keys());
    torch::serialize::InputArchive root;
    archive_from_bytes(root, ck.blob);
    torch::serialize::InputArchive model_ar, disc_ar, opt_g_ar, opt_d_ar;
    root.read("model", model_ar);
    root.read("disc", disc_ar);
    root.read("opt_g", opt_g_ar);
    root.read("opt_d", opt_d_ar);
    model_->load(model_ar);
    disc_->load(disc_ar);
    opt_g_->load(opt_g_ar);
    opt_d_->load(opt_d_ar);
    torch::Tensor rng;
    root.read("rng", rng);
    set_rng_state(rng);
    step_ = ck.manifest.step;
}

FactorizedTokenizer load_tokenizer(const std::filesystem::path& manifest_path, RunConfig* cfg_out,
                                   std::int64_t* step_out) {
    const auto ck = load_checkpoint(manifest_path);
    if (ck.manifest.kind != "tokenizer") throw ConfigError(manifest_path.string() + " is not a tokenizer checkpoint");
    const auto cfg = run_config_from(ck.manifest.config);
    FactorizedTokenizer model(cfg.tokenizer);
    torch::serialize::InputArchive root;
    archive_from_bytes(root, ck.blob);
    torch::serialize::InputArchive model_ar;
    root.read("model", model_ar);
    model->load(model_ar);
    model->eval();
    if (cfg_out) *cfg_out = cfg;
    if (step_out) *step_out = ck.manifest.step;
    return model;
}

// ---- FAR ----

FarVocab vocab_of(const TokenCache& cache) {
    FarVocab v;
    v.grid_h = cache.grid_h;
    v.grid_w = cache.grid_w;
    for (auto s : cache.codebook_sizes) v.sizes.push_back(static_cast<int>(s));
    return v;
}

namespace {

KeyValues far_snapshot(const RunConfig& cfg, const FarVocab& vocab) {
    auto kv = to_key_values(cfg);
    std::string sizes;
    for (auto s : vocab.sizes) sizes += (sizes.empty() ? "" : ",") + std::to_string(s);
    kv["vocab.sizes"] = sizes;
    kv["vocab.grid_h"] = std::to_string(vocab.grid_h);
    kv["vocab.grid_w"] = std::to_string(vocab.grid_w);
    return kv;
}

std::pair<RunConfig, FarVocab> parse_far_snapshot(KeyValues kv) {
    FarVocab v;
    try {
        std::string sizes = kv.at("vocab.sizes");
        std::size_t start = 0;
        while (start <= sizes.size()) {
            const auto comma = sizes.find(',', start);
            v.sizes.push_back(std::stoi(sizes.substr(start, comma - start)));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        v.grid_h = std::stoi(kv.at("vocab.grid_h"));
        v.grid_w = std::stoi(kv.at("vocab.grid_w"));
    } catch (const std::exception&) {
        throw ConfigError("FAR checkpoint lacks a valid vocabulary snapshot");
    }
    kv.erase("vocab.sizes");
    kv.erase("vocab.grid_h");
    kv.erase("vocab.grid_w");
    return {run_config_from(kv), v};
}

}  // namespace

FarTrainer::FarTrainer(RunConfig cfg, TokenCache train) : cfg_(std::move(cfg)), train_(std::move(train)) {
    cfg_.far.validate();
    cfg_.train.validate();
    if (train_.grids.empty()) throw std::invalid_argument("FAR training needs a non-empty token cache");
    tokens_ = grids_to_tokens(train_.grids);
    labels_ = grids_to_labels(train_.grids, cfg_.far.num_classes);
    if (labels_.max().item<std::int64_t>() > cfg_.far.num_classes) {
        throw ConfigError("token cache labels exceed num_classes (" + std::to_string(cfg_.far.num_classes) + ")");
    }
    torch::manual_seed(cfg_.train.seed);
    model_ = FarModel(cfg_.far, vocab_of(train_));
    opt_ = std::make_unique<torch::optim::Adam>(make_adam(model_->parameters(), cfg_.train));
}

FarTrainer::Batch FarTrainer::make_batch(std::int64_t step) const {
    const auto idx = torch::tensor(batch_indices(step, cfg_.train.batch_size, tokens_.size(0), cfg_.train.seed),
                                   torch::kLong);
    return {labels_.index_select(0, idx), tokens_.index_select(0, idx)};
}

double FarTrainer::step() { return step(make_batch(step_)); }

double FarTrainer::step(const Batch& batch) {
    model_->train();
    opt_->zero_grad();
    const auto loss = model_->sequence_loss(batch.classes, batch.tokens, true);
    const double value = scalar(loss);
    if (!std::isfinite(value)) throw LossError("non-finite loss term: ce_loss");
    loss.backward();
    if (cfg_.train.far_grad_clip > 0) torch::nn::utils::clip_grad_norm_(model_->parameters(), cfg_.train.far_grad_clip);
    opt_->step();
    ++step_;
    return value;
}

double FarTrainer::evaluate(const TokenCache& cache, int batch_size) {
    torch::NoGradGuard guard;
    const bool was_training = model_->is_training();
    model_->eval();
    const auto tokens = grids_to_tokens(cache.grids);
    const auto labels = grids_to_labels(cache.grids, cfg_.far.num_classes);
    double sum = 0;
    for (std::int64_t start = 0; start < tokens.size(0); start += batch_size) {
        const auto end = std::min<std::int64_t>(start + batch_size, tokens.size(0));
        const auto loss = model_->sequence_loss(labels.slice(0, start, end), tokens.slice(0, start, end), false);
        sum += scalar(loss) * static_cast<double>(end - start);
    }
    if (was_training) model_->train();
    return sum / static_cast<double>(tokens.size(0));
}

CheckpointManifest FarTrainer::save(const std::filesystem::path& manifest_path) {
    torch::serialize::OutputArchive root, model_ar, opt_ar;
    model_->save(model_ar);
    opt_->save(opt_ar);
    root.write("model", model_ar);
    root.write("opt", opt_ar);
    root.write("rng", rng_state());
    CheckpointManifest m;
    m.kind = "far";
    m.config = far_snapshot(cfg_, model_->vocab());
    m.step = step_;
    return save_checkpoint(manifest_path, m, archive_to_bytes(root));
}

void FarTrainer::resume(const std::filesystem::path& manifest_path) {
    const auto ck = load_checkpoint(manifest_path);
    if (ck.manifest.kind != "far") throw ConfigError("checkpoint is not a FAR checkpoint");
    auto expected = far_snapshot(cfg_, model_->vocab());
    auto keys = far_shape_keys();
    keys.insert(keys.end(), {"vocab.sizes", "vocab.grid_h", "vocab.grid_w"});
    require_compatible(ck.manifest.config, expected, keys);
    torch::serialize::InputArchive root, model_ar, opt_ar;
    archive_from_bytes(root, ck.blob);
    root.read("model", model_ar);
    root.read("opt", opt_ar);
    model_->load(model_ar);
    opt_->load(opt_ar);
    torch::Tensor rng;
    root.read("rng", rng);
    set_rng_state(rng);
    step_ = ck.manifest.step;
}

FarModel load_far(const std::filesystem::path& manifest_path, RunConfig* cfg_out) {
    const auto ck = load_checkpoint(manifest_path);
    if (ck.manifest.kind != "far") throw ConfigError(manifest_path.string() + " is not a FAR checkpoint");
    auto [cfg, vocab] = parse_far_snapshot(ck.manifest.config);
    FarModel model(cfg.far, vocab);
    torch::serialize::InputArchive root, model_ar;
    archive_from_bytes(root, ck.blob);
    root.read("model", model_ar);
    model->load(model_ar);
    model->eval();
    if (cfg_out) *cfg_out = cfg;
    return model;
}

// ---- loops ----

void train_tokenizer(TokenizerTrainer& trainer, const TrainRunOptions& opts, const TokenizerObserver& observer) {
    std::filesystem::create_directories(opts.out_dir);
    if (opts.resume) trainer.resume(*opts.resume);
    auto metrics = open_metrics(opts.out_dir / "metrics.csv", loss_csv_header(), opts.resume.has_value());
    const auto& tc = trainer.config().train;
    // Same file the eval-tokenizer command appends to by default.
    const auto eval_dir = opts.out_dir / "eval";
    std::ofstream evals;
    if (tc.eval_every > 0) {
        std::filesystem::create_directories(eval_dir);
        evals = open_metrics(eval_dir / "eval.csv", eval_csv_header(trainer.config().tokenizer.k), opts.resume.has_value());
    }
    {
        Prefetcher<TrainBatch> batches([&trainer](std::int64_t s) { return trainer.make_batch(s); },
                                       trainer.current_step());
        while (trainer.current_step() < tc.max_steps) {
            const auto report = trainer.step(batches.next());
            metrics << loss_csv_row(report) << "\n";
            if (!opts.quiet && (report.step % 100 == 0 || trainer.current_step() == tc.max_steps)) {
                std::cout << "step " << report.step << " rec " << report.rec << " total " << report.total << std::endl;
            }
            if (tc.checkpoint_every > 0 && trainer.current_step() % tc.checkpoint_every == 0) {
                trainer.save(opts.out_dir / ("ckpt_" + std::to_string(trainer.current_step()) + ".json"));
            }
            if (tc.eval_every > 0 && trainer.current_step() % tc.eval_every == 0) {
                EvalOptions eo;
                eo.step = trainer.current_step();
                eo.dump_root = eval_dir;
                evals << eval_csv_row(evaluate_tokenizer(*trainer.model(), trainer.data(), eo)) << std::endl;
            }
            if (observer && !observer(report, trainer)) break;
        }
    }
    metrics.flush();
    trainer.save(opts.out_dir / "latest.json");
}

void train_far(FarTrainer& trainer, const TrainRunOptions& opts, const FarObserver& observer) {
    std::filesystem::create_directories(opts.out_dir);
    if (opts.resume) trainer.resume(*opts.resume);
    auto metrics = open_metrics(opts.out_dir / "metrics.csv", "step,ce_loss", opts.resume.has_value());
    const auto& tc = trainer.config().train;
    {
        Prefetcher<FarTrainer::Batch> batches([&trainer](std::int64_t s) { return trainer.make_batch(s); },
                                              trainer.current_step());
        while (trainer.current_step() < tc.max_steps) {
            const auto step = trainer.current_step();
            const double loss = trainer.step(batches.next());
            metrics << step << "," << loss << "\n";
            if (!opts.quiet && (step % 100 == 0 || trainer.current_step() == tc.max_steps)) {
                std::cout << "step " << step << " ce " << loss << std::endl;
            }
            if (tc.checkpoint_every > 0 && trainer.current_step() % tc.checkpoint_every == 0) {
                trainer.save(opts.out_dir / ("ckpt_" + std::to_string(trainer.current_step()) + ".json"));
            }
            if (observer && !observer(step, loss, trainer)) break;
        }
    }
    metrics.flush();
    trainer.save(opts.out_dir / "latest.json");
}

std::pair<TokenCache, TokenCache> split_cache(const TokenCache& cache, double fraction, std::uint64_t seed) {
    const auto n = static_cast<std::int64_t>(cache.grids.size());
    const auto held = static_cast<std::int64_t>(std::floor(static_cast<double>(n) * fraction));
    const auto order = shuffled_order(n, seed);
    TokenCache train = cache, val = cache;
    train.grids.clear();
    val.grids.clear();
    for (std::int64_t i = 0; i < n; ++i) {
        auto& dst = i < n - held ? train : val;
        dst.grids.push_back(cache.grids[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
    }
    return {train, val};
}

}  // namespace fqgan
