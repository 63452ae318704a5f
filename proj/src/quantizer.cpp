#include "fqgan/quantizer.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <string>

namespace fqgan {

SubCodebookImpl::SubCodebookImpl(int id, int size, int dim, bool l2_normalized)
    : id_(id), l2_(l2_normalized), usage_(static_cast<std::size_t>(size), 0) {
    if (size < 2 || dim < 1) throw QuantizerError("sub-codebook needs K >= 2 and D >= 1");
    const double bound = 1.0 / size;
    embeddings = register_parameter("embeddings", torch::empty({size, dim}).uniform_(-bound, bound));
}

torch::Tensor SubCodebookImpl::codes() const {
    if (!l2_) return embeddings;
    return torch::nn::functional::normalize(embeddings, torch::nn::functional::NormalizeFuncOptions().dim(1));
}

void SubCodebookImpl::record(const std::vector<std::int64_t>& indices) {
    for (auto j : indices) ++usage_[static_cast<std::size_t>(j)];
    lookups_ += static_cast<std::int64_t>(indices.size());
}

void SubCodebookImpl::reset_usage() {
    std::fill(usage_.begin(), usage_.end(), 0);
    lookups_ = 0;
}

void SubCodebookImpl::set_usage(std::vector<std::int64_t> counts) {
    if (counts.size() != usage_.size()) throw QuantizerError("set_usage: wrong number of counters");
    usage_ = std::move(counts);
    lookups_ = 0;
    for (auto c : usage_) lookups_ += c;
}

std::vector<std::int64_t> nearest_indices(const torch::Tensor& h, const torch::Tensor& embeddings) {
    if (h.dim() != 2 || embeddings.dim() != 2) throw QuantizerError("lookup expects 2-D (rows, D) tensors");
    if (h.size(1) != embeddings.size(1)) {
        throw QuantizerError("lookup dimension mismatch: features have D=" + std::to_string(h.size(1)) +
                             ", codebook has D=" + std::to_string(embeddings.size(1)));
    }
    const auto hd = h.detach().to(torch::kCPU, torch::kDouble).contiguous();
    const auto cd = embeddings.detach().to(torch::kCPU, torch::kDouble).contiguous();
    if (!torch::isfinite(hd).all().item<bool>()) throw QuantizerError("lookup input contains non-finite values");

    const auto rows = hd.size(0);
    const auto entries = cd.size(0);
    const auto dim = hd.size(1);
    const double* hp = hd.data_ptr<double>();
    const double* cp = cd.data_ptr<double>();

    std::vector<std::int64_t> out(static_cast<std::size_t>(rows));
    at::parallel_for(0, rows, 64, [&](std::int64_t begin, std::int64_t end) {
        for (std::int64_t r = begin; r < end; ++r) {
            const double* x = hp + r * dim;
            double best = std::numeric_limits<double>::infinity();
            std::int64_t best_j = 0;
            for (std::int64_t j = 0; j < entries; ++j) {
                const double* c = cp + j * dim;
                double d = 0;
                for (std::int64_t t = 0; t < dim; ++t) {
                    const double diff = x[t] - c[t];
                    d += diff * diff;
                }
                if (d < best) {
                    best = d;
                    best_j = j;
                }
            }
            out[static_cast<std::size_t>(r)] = best_j;
        }
    });
    return out;
}

QuantizedMap lookup(const torch::Tensor& h, SubCodebookImpl& codebook) {
    const auto table = codebook.codes();
    auto idx = nearest_indices(h, table);
    codebook.record(idx);

    QuantizedMap q;
    q.indices = torch::tensor(idx, torch::kLong);
    q.values = table.index_select(0, q.indices);
    {
        torch::NoGradGuard guard;
        q.quant_error = (h.detach().to(torch::kDouble) - q.values.detach().to(torch::kDouble))
                            .pow(2)
                            .sum(1)
                            .mean()
                            .item<double>();
    }
    return q;
}

FactorizedQuantization quantize_factorized(const std::vector<torch::Tensor>& h_list,
                                           const std::vector<SubCodebookImpl*>& codebooks,
                                           int grid_h, int grid_w) {
    if (h_list.size() != codebooks.size() || h_list.empty()) {
        throw QuantizerError("quantize_factorized needs one feature map per sub-codebook");
    }
    const auto rows = h_list.front().size(0);
    const int patches = grid_h * grid_w;
    if (patches <= 0 || rows % patches != 0) throw QuantizerError("row count is not a whole number of grids");
    for (const auto& h : h_list) {
        if (h.size(0) != rows) throw QuantizerError("all branches must share the patch count");
    }

    const int k = static_cast<int>(h_list.size());
    FactorizedQuantization out;
    out.maps.reserve(h_list.size());
    for (std::size_t i = 0; i < h_list.size(); ++i) out.maps.push_back(lookup(h_list[i], *codebooks[i]));

    const auto images = rows / patches;
    out.grids.resize(static_cast<std::size_t>(images));
    for (std::int64_t n = 0; n < images; ++n) {
        auto& grid = out.grids[static_cast<std::size_t>(n)];
        grid.grid_h = grid_h;
        grid.grid_w = grid_w;
        grid.k = k;
        grid.tokens.resize(static_cast<std::size_t>(patches) * k);
    }
    for (int i = 0; i < k; ++i) {
        const auto idx = out.maps[static_cast<std::size_t>(i)].indices;
        const auto* ip = idx.data_ptr<std::int64_t>();
        for (std::int64_t r = 0; r < rows; ++r) {
            out.grids[static_cast<std::size_t>(r / patches)].at(static_cast<int>(r % patches), i) =
                static_cast<std::uint32_t>(ip[r]);
        }
    }
    return out;
}

namespace {

struct StraightThroughFn : torch::autograd::Function<StraightThroughFn> {
    static torch::Tensor forward(torch::autograd::AutogradContext*, const torch::Tensor& h, const torch::Tensor& q) {
        (void)h;
        return q.detach().clone();
    }
    static torch::autograd::variable_list backward(torch::autograd::AutogradContext*,
                                                   torch::autograd::variable_list grads) {
        return {grads[0], torch::Tensor()};
    }
};

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes()) throw QuantizerError(std::string(what) + ": shape mismatch");
}

}  // namespace

torch::Tensor straight_through(const torch::Tensor& h, const torch::Tensor& q_values) {
    check_same_shape(h, q_values, "straight_through");
    return StraightThroughFn::apply(h, q_values);
}

torch::Tensor straight_through(const torch::Tensor& h, const QuantizedMap& q) {
    return straight_through(h, q.values);
}

torch::Tensor vq_commit_loss(const torch::Tensor& h, const torch::Tensor& q_values, double beta) {
    check_same_shape(h, q_values, "vq_commit_loss");
    if (beta < 0) throw QuantizerError("vq_commit_loss: beta must be >= 0");
    const auto codebook_term = (h.detach() - q_values).pow(2).mean();
    const auto commit_term = (h - q_values.detach()).pow(2).mean();
    return codebook_term + beta * commit_term;
}

torch::Tensor vq_commit_loss(const torch::Tensor& h, const QuantizedMap& q, double beta) {
    return vq_commit_loss(h, q.values, beta);
}

torch::Tensor disentangle_loss(const std::vector<torch::Tensor>& q_list) {
    if (q_list.size() < 2) throw QuantizerError("disentangle_loss needs at least two branches");
    std::vector<torch::Tensor> unit;
    unit.reserve(q_list.size());
    for (const auto& q : q_list) {
        if (q.dim() != 2) throw QuantizerError("disentangle_loss expects (rows, D) code maps");
        check_same_shape(q, q_list.front(), "disentangle_loss");
        const auto norms = q.norm(2, 1, /*keepdim=*/true);
        if ((norms < 1e-12).any().item<bool>()) {
            throw QuantizerError("disentangle_loss: zero-norm code vector");
        }
        unit.push_back(q / norms);
    }
    torch::Tensor total;
    int pairs = 0;
    for (std::size_t a = 0; a < unit.size(); ++a) {
        for (std::size_t b = a + 1; b < unit.size(); ++b) {
            // Rounding can push |cos| of aligned rows a hair past 1.
            const auto dot = (unit[a] * unit[b]).sum(1).clamp(-1.0, 1.0);
            const auto term = dot.pow(2).mean();
            total = total.defined() ? total + term : term;
            ++pairs;
        }
    }
    return total / pairs;
}

torch::Tensor disentangle_loss(const std::vector<QuantizedMap>& q_list) {
    std::vector<torch::Tensor> values;
    values.reserve(q_list.size());
    for (const auto& q : q_list) values.push_back(q.values);
    return disentangle_loss(values);
}

UsageStats usage_stats(const std::vector<std::int64_t>& counts) {
    std::int64_t total = 0;
    std::int64_t used = 0;
    for (auto c : counts) {
        total += c;
        used += c > 0;
    }
    if (total == 0 || counts.empty()) throw QuantizerError("usage_stats: no lookups recorded");
    double entropy = 0;
    for (auto c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / static_cast<double>(total);
        entropy -= p * std::log2(p);
    }
    return {static_cast<double>(used) / static_cast<double>(counts.size()), entropy};
}

UsageStats usage_stats(const SubCodebookImpl& codebook) { return usage_stats(codebook.usage_counts()); }

std::uint64_t conceptual_capacity(const std::vector<std::uint64_t>& sizes) {
    if (sizes.empty()) throw QuantizerError("conceptual_capacity: no sub-codebooks");
    std::uint64_t product = 1;
    for (auto s : sizes) {
        if (s != 0 && product > std::numeric_limits<std::uint64_t>::max() / s) {
            throw QuantizerError("conceptual_capacity overflows 64 bits");
        }
        product *= s;
    }
    return product;
}

std::uint64_t conceptual_capacity(const TokenizerConfig& config) {
    config.validate();
    return conceptual_capacity(std::vector<std::uint64_t>(static_cast<std::size_t>(config.k),
                                                          static_cast<std::uint64_t>(config.codebook_size)));
}

std::vector<std::filesystem::path> export_codebooks(const std::vector<SubCodebookImpl*>& codebooks,
                                                    const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> written;
    for (const auto* cb : codebooks) {
        const auto path = dir / ("codebook_" + std::to_string(cb->id()) + ".csv");
        std::ofstream out(path);
        if (!out) throw QuantizerError("cannot write " + path.string());
        const auto e = cb->embeddings.detach().to(torch::kFloat).contiguous();
        const auto* p = e.data_ptr<float>();
        const auto rows = e.size(0);
        const auto cols = e.size(1);
        out.precision(9);
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t c = 0; c < cols; ++c) {
                if (c) out << ',';
                out << p[r * cols + c];
            }
            out << '\n';
        }
        written.push_back(path);
    }
    return written;
}

}  // namespace fqgan
