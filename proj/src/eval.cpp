#include "fqgan/eval.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace fqgan {

double psnr_from_mse(double mse) {
    if (mse < 1e-10) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double psnr(const torch::Tensor& x, const torch::Tensor& x_hat) {
    if (x.sizes() != x_hat.sizes()) throw std::invalid_argument("psnr: shape mismatch");
    const auto a = (x.detach().to(torch::kDouble) + 1.0) * 0.5;
    const auto b = (x_hat.detach().to(torch::kDouble) + 1.0) * 0.5;
    return psnr_from_mse((a - b).pow(2).mean().item<double>());
}

FeatureStats::FeatureStats(std::int64_t dim)
    : dim_(dim), mean_(torch::zeros({dim}, torch::kDouble)), m2_(torch::zeros({dim, dim}, torch::kDouble)) {}

void FeatureStats::add(const torch::Tensor& rows) {
    if (rows.dim() != 2 || rows.size(1) != dim_) throw std::invalid_argument("FeatureStats::add: expected (n, d) rows");
    if (rows.size(0) == 0) return;
    FeatureStats shard(dim_);
    const auto x = rows.detach().to(torch::kDouble);
    shard.count_ = x.size(0);
    shard.mean_ = x.mean(0);
    const auto centered = x - shard.mean_;
    shard.m2_ = centered.t().matmul(centered);
    merge(shard);
}

void FeatureStats::merge(const FeatureStats& other) {
    if (other.dim_ != dim_) throw std::invalid_argument("FeatureStats::merge: dimension mismatch");
    if (other.count_ == 0) return;
    if (count_ == 0) {
        *this = other;
        return;
    }
    const double na = static_cast<double>(count_);
    const double nb = static_cast<double>(other.count_);
    const double n = na + nb;
    const auto delta = other.mean_ - mean_;
    mean_ = mean_ + delta * (nb / n);
    m2_ = m2_ + other.m2_ + torch::outer(delta, delta) * (na * nb / n);
    count_ += other.count_;
}

torch::Tensor FeatureStats::covariance() const {
    if (count_ < 2) throw std::invalid_argument("FeatureStats: covariance needs at least two samples");
    return m2_ / static_cast<double>(count_ - 1);
}

FeatureStats FeatureStats::from(const torch::Tensor& mean, const torch::Tensor& covariance, std::int64_t count) {
    FeatureStats s(mean.size(0));
    s.count_ = count;
    s.mean_ = mean.to(torch::kDouble);
    s.m2_ = covariance.to(torch::kDouble) * static_cast<double>(count - 1);
    return s;
}

namespace {

torch::Tensor sqrt_psd(const torch::Tensor& m) {
    const auto sym = (m + m.t()) * 0.5;
    auto [values, vectors] = torch::linalg_eigh(sym);
    return vectors.matmul(torch::diag(values.clamp_min(0.0).sqrt())).matmul(vectors.t());
}

}  // namespace

double proxy_fid(const FeatureStats& a, const FeatureStats& b, double eps) {
    if (a.dim() != b.dim()) throw std::invalid_argument("proxy_fid: feature dimensions differ");
    if (a.count() < a.dim() + 1 || b.count() < b.dim() + 1) {
        throw std::invalid_argument("proxy_fid: need at least dim+1 = " + std::to_string(a.dim() + 1) +
                                    " samples per side");
    }
    const auto eye = torch::eye(a.dim(), torch::kDouble) * eps;
    const auto s1 = a.covariance() + eye;
    const auto s2 = b.covariance() + eye;
    const auto root1 = sqrt_psd(s1);
    const auto inner = root1.matmul(s2).matmul(root1);
    const auto eig = torch::linalg_eigvalsh((inner + inner.t()) * 0.5).clamp_min(0.0);
    const double tr_cross = eig.sqrt().sum().item<double>();
    const double mean_term = (a.mean() - b.mean()).pow(2).sum().item<double>();
    // Regularised on both sides so identical inputs cancel.
    const double tr = (a.covariance().trace() + b.covariance().trace()).item<double>() + 2 * eps * a.dim();
    return std::max(0.0, mean_term + tr - 2.0 * tr_cross);
}

ProxyFeatureExtractor::ProxyFeatureExtractor() {
    net_ = FrozenConvNet(kProxyFidSeed, std::vector<int>{16, 32, 16});
}

torch::Tensor ProxyFeatureExtractor::features(const torch::Tensor& images) {
    torch::NoGradGuard guard;
    return net_->forward(images).mean({2, 3});
}

FeatureStats ProxyFeatureExtractor::stats(const torch::Tensor& images, int chunk) {
    FeatureStats s(dim());
    for (std::int64_t start = 0; start < images.size(0); start += chunk) {
        s.add(features(images.slice(0, start, std::min<std::int64_t>(start + chunk, images.size(0)))));
    }
    return s;
}

std::string eval_csv_header(int k) {
    std::string h = "step,psnr,mse,proxy_fid,sample_count";
    for (int i = 1; i <= k; ++i) h += ",usage_" + std::to_string(i) + ",entropy_" + std::to_string(i);
    return h;
}

std::string eval_csv_row(const EvalReport& r) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%lld,%.6f,%.9g,%.9g,%lld", static_cast<long long>(r.step), r.psnr, r.mse,
                  r.proxy_fid, static_cast<long long>(r.sample_count));
    std::string row = buf;
    for (std::size_t i = 0; i < r.usage.size(); ++i) {
        std::snprintf(buf, sizeof buf, ",%.6f,%.6f", r.usage[i], r.entropy[i]);
        row += buf;
    }
    return row;
}

EvalReport evaluate_tokenizer(FactorizedTokenizerImpl& model, const ImageDataset& data, const EvalOptions& opts) {
    torch::NoGradGuard guard;
    const bool was_training = model.is_training();
    model.eval();
    for (auto* cb : model.codebooks()) cb->reset_usage();

    ProxyFeatureExtractor extractor;
    FeatureStats real_stats(extractor.dim());
    FeatureStats recon_stats(extractor.dim());
    EvalReport report;
    report.step = opts.step;
    double psnr_sum = 0;
    double sq_err = 0;
    const auto n = data.size();
    const int k = model.config().k;

    for (std::int64_t start = 0; start < n; start += opts.batch_size) {
        const auto end = std::min<std::int64_t>(start + opts.batch_size, n);
        const auto x = data.images.slice(0, start, end);
        const auto recon = model.reconstruct(x).clamp(-1.0, 1.0);
        for (std::int64_t i = 0; i < x.size(0); ++i) psnr_sum += psnr(x[i], recon[i]);
        sq_err += (((x.to(torch::kDouble) - recon.to(torch::kDouble)) * 0.5).pow(2)).sum().item<double>();
        real_stats.add(extractor.features(x));
        recon_stats.add(extractor.features(recon));

        if (opts.dump_root && start < opts.dump_count) {
            const auto dump_end = std::min<std::int64_t>(end, opts.dump_count);
            const auto dir = *opts.dump_root / std::to_string(opts.step);
            std::filesystem::create_directories(dir / "full");
            for (std::int64_t i = start; i < dump_end; ++i) {
                write_png(recon[i - start], dir / "full" / ("img_" + std::to_string(i) + ".png"));
            }
            for (int b = 1; b <= k; ++b) {
                // Probe passes must not count towards usage.
                std::vector<std::vector<std::int64_t>> saved;
                for (auto* cb : model.codebooks()) saved.push_back(cb->usage_counts());
                const auto single = model.reconstruct_single_branch(x.slice(0, 0, dump_end - start), b).clamp(-1.0, 1.0);
                for (std::size_t c = 0; c < saved.size(); ++c) model.codebooks()[c]->set_usage(saved[c]);
                const auto bdir = dir / ("branch_" + std::to_string(b));
                std::filesystem::create_directories(bdir);
                for (std::int64_t i = 0; i < single.size(0); ++i) {
                    write_png(single[i], bdir / ("img_" + std::to_string(start + i) + ".png"));
                }
            }
        }
    }
    report.sample_count = n;
    report.psnr = n > 0 ? psnr_sum / static_cast<double>(n) : 0.0;
    report.mse = n > 0 ? sq_err / static_cast<double>(data.images.numel()) : 0.0;
    for (auto* cb : model.codebooks()) {
        const auto u = usage_stats(*cb);
        report.usage.push_back(u.usage_fraction);
        report.entropy.push_back(u.entropy_bits);
    }
    report.proxy_fid = (real_stats.count() > real_stats.dim()) ? proxy_fid(real_stats, recon_stats)
                                                              : std::numeric_limits<double>::quiet_NaN();
    if (was_training) model.train();
    return report;
}

}  // namespace fqgan
