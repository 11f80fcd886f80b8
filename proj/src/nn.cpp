#include "fedbe/nn.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include <Eigen/Dense>

#include "fedbe/errors.hpp"
#include "fedbe/nn_internal.hpp"
#include "fedbe/rng.hpp"

namespace fedbe::nn {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<MatRM>;
using CMap = Eigen::Map<const MatRM>;
using StridedMap = Eigen::Map<MatRM, 0, Eigen::OuterStride<>>;
using StridedCMap = Eigen::Map<const MatRM, 0, Eigen::OuterStride<>>;

CMap mat(const Tensor& t) {
    return CMap(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

Map mat(Tensor& t) {
    return Map(t.data.data(), static_cast<Eigen::Index>(t.rows()),
               static_cast<Eigen::Index>(t.cols()));
}

// y = x*W + b, row-wise bias
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = Tensor::uninit({x.rows(), w.cols()});
    mat(y).noalias() = mat(x) * mat(w);
    const std::size_t n = w.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
        double* row = y.data.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += b.data[j];
    }
    return y;
}

// Accumulates dW += x^T*dy, db += colsum(dy) (skipped for frozen tensors);
// returns dx = dy*W^T.
Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                       Tensor& dw, Tensor& db, bool accumulate = true) {
    if (accumulate) {
        mat(dw).noalias() += mat(x).transpose() * mat(dy);
        const std::size_t n = dy.cols();
        for (std::size_t r = 0; r < dy.rows(); ++r) {
            const double* row = dy.data.data() + r * n;
            for (std::size_t j = 0; j < n; ++j) db.data[j] += row[j];
        }
    }
    Tensor dx = Tensor::uninit({x.rows(), x.cols()});
    mat(dx).noalias() = mat(dy) * mat(w).transpose();
    return dx;
}

// Row-wise layer norm; stores xhat and 1/std for the backward pass.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift,
                  Tensor& xhat, std::vector<double>& inv_std) {
    const std::size_t rows = x.rows(), d = x.cols();
    Tensor y = Tensor::uninit({rows, d});
    xhat = Tensor::uninit({rows, d});
    inv_std.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + kLnEps);
        inv_std[r] = is;
        double* xh = xhat.data.data() + r * d;
        double* yr = y.data.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = (xr[j] - mean) * is;
            yr[j] = gain.data[j] * xh[j] + shift.data[j];
        }
    }
    return y;
}

Tensor layer_norm_backward(const Tensor& dy, const Tensor& xhat,
                           const std::vector<double>& inv_std, const Tensor& gain,
                           Tensor& dgain, Tensor& dshift, bool accumulate = true) {
    const std::size_t rows = dy.rows(), d = dy.cols();
    Tensor dx = Tensor::uninit({rows, d});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* dyr = dy.data.data() + r * d;
        const double* xh = xhat.data.data() + r * d;
        double* dxr = dx.data.data() + r * d;
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            if (accumulate) {
                dgain.data[j] += dyr[j] * xh[j];
                dshift.data[j] += dyr[j];
            }
            const double dxh = dyr[j] * gain.data[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
        }
        const double m1 = sum_dxhat / static_cast<double>(d);
        const double m2 = sum_dxhat_xhat / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dyr[j] * gain.data[j];
            dxr[j] = inv_std[r] * (dxh - m1 - xh[j] * m2);
        }
    }
    return dx;
}

using Arr = Eigen::Array<double, Eigen::Dynamic, 1>;
using ArrMap = Eigen::Map<Arr>;
using ArrCMap = Eigen::Map<const Arr>;

// tanh via exp keeps the whole GELU path on vectorized packet math;
// exp(inf)/exp(-inf) saturate to +-1 as required
Arr tanh_fast(const Arr& u) {
    return 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
}

// y = 0.5*x*(1 + tanh(c*(x + a*x^3)))
void gelu_forward(const Tensor& pre, Tensor& act) {
    ArrCMap x(pre.data.data(), static_cast<Eigen::Index>(pre.size()));
    ArrMap y(act.data.data(), static_cast<Eigen::Index>(act.size()));
    const Arr th = tanh_fast(kGeluC * (x + kGeluA * x.cube()));
    y = 0.5 * x * (1.0 + th);
}

// d_pre = d_act * gelu'(pre)
void gelu_backward(const Tensor& pre, const Tensor& d_act, Tensor& d_pre) {
    ArrCMap x(pre.data.data(), static_cast<Eigen::Index>(pre.size()));
    ArrCMap dy(d_act.data.data(), static_cast<Eigen::Index>(d_act.size()));
    ArrMap dx(d_pre.data.data(), static_cast<Eigen::Index>(d_pre.size()));
    const Arr th = tanh_fast(kGeluC * (x + kGeluA * x.cube()));
    dx = dy * (0.5 * (1.0 + th) +
               0.5 * x * (1.0 - th.square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.square()));
}

Tensor init_tensor(std::vector<std::size_t> shape, double scale, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(-scale, scale);
    return t;
}

Tensor mean_pool(const Tensor& x, std::size_t batch, std::size_t seq) {
    const std::size_t d = x.cols();
    Tensor pooled({batch, d});
    const double inv = 1.0 / static_cast<double>(seq);
    for (std::size_t b = 0; b < batch; ++b) {
        double* out = pooled.data.data() + b * d;
        for (std::size_t t = 0; t < seq; ++t) {
            const double* row = x.data.data() + (b * seq + t) * d;
            for (std::size_t j = 0; j < d; ++j) out[j] += row[j];
        }
        for (std::size_t j = 0; j < d; ++j) out[j] *= inv;
    }
    return pooled;
}

} // namespace

void ModelSpec::validate() const {
    if (num_blocks < 1) throw ConfigError("model spec: need at least one block");
    if (num_heads < 1 || hidden_dim < num_heads) {
        throw ConfigError("model spec: need hidden_dim >= num_heads >= 1");
    }
    if (hidden_dim % num_heads != 0) {
        throw ConfigError("model spec: hidden_dim must be divisible by num_heads");
    }
    if (ff_dim < 1) throw ConfigError("model spec: need ff_dim >= 1");
    if (vocab_size < 2) throw ConfigError("model spec: need vocab_size >= 2");
    if (num_classes < 2) throw ConfigError("model spec: need num_classes >= 2");
    if (max_seq_len < 1) throw ConfigError("model spec: need max_seq_len >= 1");
}

BlockParams BlockParams::zeros(const ModelSpec& spec) {
    const std::size_t d = spec.hidden_dim, f = spec.ff_dim;
    BlockParams b;
    b.w_q = Tensor({d, d}); b.b_q = Tensor({d});
    b.w_k = Tensor({d, d}); b.b_k = Tensor({d});
    b.w_v = Tensor({d, d}); b.b_v = Tensor({d});
    b.w_o = Tensor({d, d}); b.b_o = Tensor({d});
    b.w_ff1 = Tensor({d, f}); b.b_ff1 = Tensor({f});
    b.w_ff2 = Tensor({f, d}); b.b_ff2 = Tensor({d});
    b.ln1_gain = Tensor({d}); b.ln1_shift = Tensor({d});
    b.ln2_gain = Tensor({d}); b.ln2_shift = Tensor({d});
    return b;
}

std::size_t BlockParams::param_count() const {
    std::size_t n = 0;
    for_each_block_tensor(*this, [&](const char*, const Tensor& t) { n += t.size(); });
    return n;
}

HeadParams HeadParams::zeros(const ModelSpec& spec) {
    return HeadParams{Tensor({spec.hidden_dim, spec.num_classes}), Tensor({spec.num_classes})};
}

std::size_t block_param_count(const ModelSpec& spec) {
    const std::size_t d = spec.hidden_dim, f = spec.ff_dim;
    return 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (d + d);
}

std::size_t head_param_count(const ModelSpec& spec) {
    return spec.hidden_dim * spec.num_classes + spec.num_classes;
}

TrainableMask TrainableMask::none(const ModelSpec& spec) {
    TrainableMask m;
    m.blocks.assign(spec.num_blocks, false);
    return m;
}

TrainableMask TrainableMask::full(const ModelSpec& spec, const std::string& task) {
    TrainableMask m;
    m.embeddings = true;
    m.blocks.assign(spec.num_blocks, true);
    m.heads.insert(task);
    return m;
}

TrainableMask TrainableMask::head_only(const ModelSpec& spec, const std::string& task) {
    TrainableMask m = none(spec);
    m.heads.insert(task);
    return m;
}

TokenBatch TokenBatch::from_examples(const std::vector<datagen::Example>& examples,
                                     const std::vector<std::size_t>& indices) {
    TokenBatch b;
    b.batch_size = indices.size();
    b.seq_len = indices.empty() ? 0 : examples[indices[0]].tokens.size();
    b.tokens.reserve(b.batch_size * b.seq_len);
    for (std::size_t i : indices) {
        const auto& toks = examples[i].tokens;
        b.tokens.insert(b.tokens.end(), toks.begin(), toks.end());
    }
    return b;
}

BaseModel init_model(const ModelSpec& spec, std::uint64_t seed,
                     const std::vector<std::string>& tasks) {
    spec.validate();
    BaseModel m;
    m.spec = spec;
    m.tok_embedding = Tensor({spec.vocab_size, spec.hidden_dim});
    m.pos_embedding = Tensor({spec.max_seq_len, spec.hidden_dim});
    m.blocks.assign(spec.num_blocks, BlockParams::zeros(spec));
    for (const std::string& t : tasks) m.heads.emplace(t, HeadParams::zeros(spec));

    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.hidden_dim));
    Rng rng = substream(seed, "init");
    for_each_param(m, [&](const std::string& id, Tensor& t) {
        if (id.find("ln") != std::string::npos) {
            const bool gain = id.find("gain") != std::string::npos;
            t.fill(gain ? 1.0 : 0.0);
        } else {
            t = init_tensor(t.shape, scale, rng);
        }
    });
    return m;
}

namespace detail {

void validate_batch(const ModelSpec& spec, const TokenBatch& batch) {
    if (batch.batch_size == 0 || batch.seq_len == 0) {
        throw InputError("empty batch");
    }
    if (batch.seq_len > spec.max_seq_len) {
        throw InputError("sequence length exceeds max_seq_len");
    }
    for (std::int32_t t : batch.tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= spec.vocab_size) {
            throw InputError("token id out of range");
        }
    }
}

const HeadParams& get_head(const BaseModel& model, const std::string& task) {
    auto it = model.heads.find(task);
    if (it == model.heads.end()) throw ConfigError("unknown task id: " + task);
    return it->second;
}

Tensor branch_forward(const ModelSpec& spec, const BlockParams& p, const Tensor& x,
                      std::size_t seq_len, BlockCache& c) {
    const std::size_t rows = x.rows(), d = spec.hidden_dim;
    const std::size_t batch = rows / seq_len;
    const std::size_t heads = spec.num_heads, dh = spec.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    c.seq_len = seq_len;
    c.x_in = x;
    const Tensor ln1 = layer_norm(x, p.ln1_gain, p.ln1_shift, c.ln1_xhat, c.ln1_inv_std);
    c.q = linear(ln1, p.w_q, p.b_q);
    c.k = linear(ln1, p.w_k, p.b_k);
    c.v = linear(ln1, p.w_v, p.b_v);

    c.attn_probs = Tensor::uninit({batch * heads * seq_len, seq_len});
    c.attn_ctx = Tensor::uninit({rows, d});
    const auto os = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
    const auto eseq = static_cast<Eigen::Index>(seq_len);
    const auto edh = static_cast<Eigen::Index>(dh);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            StridedCMap Q(c.q.data.data() + b * seq_len * d + h * dh, eseq, edh, os);
            StridedCMap K(c.k.data.data() + b * seq_len * d + h * dh, eseq, edh, os);
            StridedCMap V(c.v.data.data() + b * seq_len * d + h * dh, eseq, edh, os);
            Map P(c.attn_probs.data.data() + (b * heads + h) * seq_len * seq_len, eseq, eseq);
            P.noalias() = Q * K.transpose() * scale;
            for (std::size_t t = 0; t < seq_len; ++t) {
                double* row = c.attn_probs.data.data() + ((b * heads + h) * seq_len + t) * seq_len;
                ArrMap r(row, static_cast<Eigen::Index>(seq_len));
                r = (r - r.maxCoeff()).exp();
                r /= r.sum();
            }
            StridedMap Ctx(c.attn_ctx.data.data() + b * seq_len * d + h * dh, eseq, edh, os);
            CMap Pc(c.attn_probs.data.data() + (b * heads + h) * seq_len * seq_len, eseq, eseq);
            Ctx.noalias() = Pc * V;
        }
    }

    Tensor contrib = linear(c.attn_ctx, p.w_o, p.b_o);
    c.h = x;
    c.h += contrib;
    const Tensor ln2 = layer_norm(c.h, p.ln2_gain, p.ln2_shift, c.ln2_xhat, c.ln2_inv_std);
    c.ff_pre = linear(ln2, p.w_ff1, p.b_ff1);
    c.ff_act = Tensor::uninit({rows, spec.ff_dim});
    gelu_forward(c.ff_pre, c.ff_act);
    const Tensor f = linear(c.ff_act, p.w_ff2, p.b_ff2);
    contrib += f;
    return contrib;
}

Tensor branch_backward(const ModelSpec& spec, const BlockParams& p, const BlockCache& c,
                       const Tensor& d_contrib, BlockParams& g, bool accumulate) {
    const std::size_t rows = c.x_in.rows(), d = spec.hidden_dim;
    const std::size_t seq_len = c.seq_len;
    const std::size_t batch = rows / seq_len;
    const std::size_t heads = spec.num_heads, dh = spec.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // feed-forward path: f = gelu(LN2(h)*W1 + b1)*W2 + b2
    Tensor d_ff_act = linear_backward(c.ff_act, p.w_ff2, d_contrib, g.w_ff2, g.b_ff2, accumulate);
    Tensor d_ff_pre = Tensor::uninit({rows, spec.ff_dim});
    gelu_backward(c.ff_pre, d_ff_act, d_ff_pre);
    Tensor ln2_out = Tensor::uninit({rows, d});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xh = c.ln2_xhat.data.data() + r * d;
        double* o = ln2_out.data.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) o[j] = p.ln2_gain.data[j] * xh[j] + p.ln2_shift.data[j];
    }
    Tensor d_ln2_out = linear_backward(ln2_out, p.w_ff1, d_ff_pre, g.w_ff1, g.b_ff1, accumulate);
    Tensor d_h = layer_norm_backward(d_ln2_out, c.ln2_xhat, c.ln2_inv_std, p.ln2_gain,
                                     g.ln2_gain, g.ln2_shift, accumulate);

    // contribution = a + f and h = x + a, so a receives d_contrib plus d_h
    Tensor da = d_contrib;
    da += d_h;

    Tensor d_ctx = linear_backward(c.attn_ctx, p.w_o, da, g.w_o, g.b_o, accumulate);

    Tensor dq = Tensor::uninit({rows, d}), dk = Tensor::uninit({rows, d}),
           dv = Tensor::uninit({rows, d});
    const auto os = Eigen::OuterStride<>(static_cast<Eigen::Index>(d));
    const auto eseq = static_cast<Eigen::Index>(seq_len);
    const auto edh = static_cast<Eigen::Index>(dh);
    MatRM dP(eseq, eseq), dS(eseq, eseq);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            StridedCMap Q(c.q.data.data() + b * seq_len * d + h * dh, eseq, edh, os);
            StridedCMap K(c.k.data.data() + b * seq_len * d + h * dh, eseq, edh, os);
            StridedCMap V(c.v.data.data() + b * seq_len * d + h * dh, eseq, edh, os);
            StridedCMap dCtx(d_ctx.data.data() + b * seq_len * d + h * dh, eseq, edh, os);
            CMap P(c.attn_probs.data.data() + (b * heads + h) * seq_len * seq_len, eseq, eseq);
            dP.noalias() = dCtx * V.transpose();
            for (Eigen::Index t = 0; t < dP.rows(); ++t) {
                const double dot = dP.row(t).cwiseProduct(P.row(t)).sum();
                dS.row(t) = (P.row(t).array() * (dP.row(t).array() - dot)).matrix();
            }
            StridedMap dQ(dq.data.data() + b * seq_len * d + h * dh, eseq, edh, os);
            StridedMap dK(dk.data.data() + b * seq_len * d + h * dh, eseq, edh, os);
            StridedMap dV(dv.data.data() + b * seq_len * d + h * dh, eseq, edh, os);
            dQ.noalias() = dS * K * scale;
            dK.noalias() = dS.transpose() * Q * scale;
            dV.noalias() = P.transpose() * dCtx;
        }
    }

    Tensor ln1_out = Tensor::uninit({rows, d});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xh = c.ln1_xhat.data.data() + r * d;
        double* o = ln1_out.data.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) o[j] = p.ln1_gain.data[j] * xh[j] + p.ln1_shift.data[j];
    }
    Tensor d_ln1_out = linear_backward(ln1_out, p.w_q, dq, g.w_q, g.b_q, accumulate);
    d_ln1_out += linear_backward(ln1_out, p.w_k, dk, g.w_k, g.b_k, accumulate);
    d_ln1_out += linear_backward(ln1_out, p.w_v, dv, g.w_v, g.b_v, accumulate);
    Tensor dx = layer_norm_backward(d_ln1_out, c.ln1_xhat, c.ln1_inv_std, p.ln1_gain,
                                    g.ln1_gain, g.ln1_shift, accumulate);

    // dL/dx = attention path + d_h (through h = x + a)
    dx += d_h;
    return dx;
}

Tensor forward_core(const BaseModel& model, const ExpansionView* exp,
                    const TokenBatch& batch, const std::string& task, ForwardCache* cache) {
    const ModelSpec& spec = model.spec;
    validate_batch(spec, batch);
    const HeadParams& head = get_head(model, task);
    const std::size_t B = batch.batch_size, T = batch.seq_len, d = spec.hidden_dim;

    Tensor x = Tensor::uninit({B * T, d});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t tok = static_cast<std::size_t>(batch.tok(b, t));
            const double* te = model.tok_embedding.data.data() + tok * d;
            const double* pe = model.pos_embedding.data.data() + t * d;
            double* row = x.data.data() + (b * T + t) * d;
            for (std::size_t j = 0; j < d; ++j) row[j] = te[j] + pe[j];
        }
    }
    if (cache) {
        cache->batch = batch;
        cache->task = task;
        cache->x0 = x;
        cache->blocks.assign(spec.num_blocks, BlockCache{});
        cache->expanded.clear();
    }

    BlockCache scratch;
    for (std::size_t l = 0; l < spec.num_blocks; ++l) {
        BlockCache& bc = cache ? cache->blocks[l] : scratch;
        const Tensor contrib = branch_forward(spec, model.blocks[l], x, T, bc);
        const int position = static_cast<int>(l) + 1;
        const bool active = exp && exp->blocks && exp->blocks->count(position) &&
                            exp->active && exp->active->count(position);
        x += contrib;
        if (active) {
            const BlockParams& ep = exp->blocks->at(position);
            BlockCache escratch;
            BlockCache& ec = cache ? cache->expanded[position] : escratch;
            const Tensor& z = exp->feed_branch ? contrib : x;
            const Tensor e = branch_forward(spec, ep, z, T, ec);
            x += e;
        }
    }

    Tensor pooled = mean_pool(x, B, T);
    Tensor logits = linear(pooled, head.weight, head.bias);
    if (cache) {
        cache->x_final = std::move(x);
        cache->pooled = std::move(pooled);
    }
    return logits;
}

GradientSet make_zero_grads(const BaseModel& model, const ExpansionView* exp) {
    GradientSet g;
    g.tok_embedding = Tensor(model.tok_embedding.shape);
    g.pos_embedding = Tensor(model.pos_embedding.shape);
    g.blocks.assign(model.spec.num_blocks, BlockParams::zeros(model.spec));
    for (const auto& [task, _] : model.heads) {
        g.heads.emplace(task, HeadParams::zeros(model.spec));
    }
    if (exp && exp->blocks) {
        for (const auto& [pos, _] : *exp->blocks) {
            g.expanded.emplace(pos, BlockParams::zeros(model.spec));
        }
    }
    return g;
}

void backward_core(const BaseModel& model, const ExpansionView* exp, const ForwardCache& cache,
                   const Tensor& dlogits, GradientSet& grads, const TrainableMask* param_filter) {
    const ModelSpec& spec = model.spec;
    const HeadParams& head = get_head(model, cache.task);
    const std::size_t B = cache.batch.batch_size, T = cache.batch.seq_len, d = spec.hidden_dim;

    const auto block_on = [&](std::size_t l) {
        return !param_filter || (l < param_filter->blocks.size() && param_filter->blocks[l]);
    };
    const auto expanded_on = [&](int pos) {
        return !param_filter || param_filter->expanded.count(pos) > 0;
    };
    const bool head_on = !param_filter || param_filter->heads.count(cache.task) > 0;
    const bool emb_on = !param_filter || param_filter->embeddings;

    HeadParams& hg = grads.heads.at(cache.task);
    Tensor dpooled =
        linear_backward(cache.pooled, head.weight, dlogits, hg.weight, hg.bias, head_on);

    Tensor dx = Tensor::uninit({B * T, d});
    const double inv_T = 1.0 / static_cast<double>(T);
    for (std::size_t b = 0; b < B; ++b) {
        const double* dp = dpooled.data.data() + b * d;
        for (std::size_t t = 0; t < T; ++t) {
            double* row = dx.data.data() + (b * T + t) * d;
            for (std::size_t j = 0; j < d; ++j) row[j] = dp[j] * inv_T;
        }
    }

    for (std::size_t li = spec.num_blocks; li-- > 0;) {
        const int position = static_cast<int>(li) + 1;
        const bool active = exp && exp->blocks && exp->blocks->count(position) &&
                            exp->active && exp->active->count(position);
        if (active) {
            const BlockParams& ep = exp->blocks->at(position);
            const BlockCache& ec = cache.expanded.at(position);
            BlockParams& eg = grads.expanded.at(position);
            if (exp->feed_branch) {
                // x' = x + b + E(b): the branch output feeds the expanded block
                Tensor db = branch_backward(spec, ep, ec, dx, eg, expanded_on(position));
                db += dx;
                Tensor dx_base = branch_backward(spec, model.blocks[li], cache.blocks[li], db,
                                                 grads.blocks[li], block_on(li));
                dx += dx_base;
            } else {
                // x' = s + E(s) with s = x + b
                Tensor ds = branch_backward(spec, ep, ec, dx, eg, expanded_on(position));
                ds += dx;
                Tensor dx_base = branch_backward(spec, model.blocks[li], cache.blocks[li], ds,
                                                 grads.blocks[li], block_on(li));
                dx_base += ds;
                dx = std::move(dx_base);
            }
        } else {
            Tensor dx_base = branch_backward(spec, model.blocks[li], cache.blocks[li], dx,
                                             grads.blocks[li], block_on(li));
            dx += dx_base;
        }
    }

    if (emb_on) {
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t t = 0; t < T; ++t) {
                const std::size_t tok = static_cast<std::size_t>(cache.batch.tok(b, t));
                const double* row = dx.data.data() + (b * T + t) * d;
                double* dte = grads.tok_embedding.data.data() + tok * d;
                double* dpe = grads.pos_embedding.data.data() + t * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dte[j] += row[j];
                    dpe[j] += row[j];
                }
            }
        }
    }
}

double ce_loss_and_dlogits(const Tensor& logits, const std::vector<int>& labels,
                           std::size_t num_classes, Tensor* dlogits) {
    const std::size_t B = logits.rows(), K = logits.cols();
    if (labels.size() != B) throw InputError("labels/batch size mismatch");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
            throw InputError("label out of range");
        }
    }
    Tensor probs = softmax_rows(logits);
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double p = probs.data[b * K + static_cast<std::size_t>(labels[b])];
        loss -= std::log(std::max(p, 1e-300));
    }
    loss /= static_cast<double>(B);
    if (dlogits) {
        *dlogits = std::move(probs);
        const double inv_B = 1.0 / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b) {
            dlogits->data[b * K + static_cast<std::size_t>(labels[b])] -= 1.0;
            for (std::size_t j = 0; j < K; ++j) dlogits->data[b * K + j] *= inv_B;
        }
    }
    return loss;
}

} // namespace detail

Tensor softmax_rows(const Tensor& logits) {
    Tensor probs = logits;
    const std::size_t K = probs.cols();
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        double* row = probs.data.data() + r * K;
        double mx = row[0];
        for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        const double inv = 1.0 / sum;
        for (std::size_t j = 0; j < K; ++j) row[j] *= inv;
    }
    return probs;
}

Tensor forward(const BaseModel& model, const TokenBatch& batch, const std::string& task,
               ForwardCache* cache) {
    return detail::forward_core(model, nullptr, batch, task, cache);
}

LossAndGrads loss_and_backward(const BaseModel& model, const TokenBatch& batch,
                               const std::vector<int>& labels, const std::string& task) {
    ForwardCache cache;
    Tensor logits = detail::forward_core(model, nullptr, batch, task, &cache);
    Tensor dlogits;
    LossAndGrads out;
    out.loss = detail::ce_loss_and_dlogits(logits, labels, model.spec.num_classes, &dlogits);
    out.grads = detail::make_zero_grads(model, nullptr);
    detail::backward_core(model, nullptr, cache, dlogits, out.grads);
    return out;
}

void apply_sgd(BaseModel& model, const GradientSet& grads, double lr,
               const TrainableMask& mask) {
    if (lr < 0.0) throw InputError("negative learning rate");
    auto update = [&](Tensor& p, const Tensor& g) {
        for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] -= lr * g.data[i];
    };
    if (mask.embeddings) {
        update(model.tok_embedding, grads.tok_embedding);
        update(model.pos_embedding, grads.pos_embedding);
    }
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        if (l < mask.blocks.size() && mask.blocks[l]) {
            zip_block_tensors(model.blocks[l], grads.blocks[l],
                              [&](Tensor& p, const Tensor& g) { update(p, g); });
        }
    }
    for (auto& [task, head] : model.heads) {
        if (mask.heads.count(task)) {
            update(head.weight, grads.heads.at(task).weight);
            update(head.bias, grads.heads.at(task).bias);
        }
    }
}

std::vector<double> block_grad_norms(const GradientSet& grads) {
    std::vector<double> norms;
    norms.reserve(grads.blocks.size());
    for (const BlockParams& b : grads.blocks) {
        double sq = 0.0;
        for_each_block_tensor(b, [&](const char*, const Tensor& t) { sq += t.sq_norm(); });
        norms.push_back(std::sqrt(sq));
    }
    return norms;
}

double finite_diff_oracle(const BaseModel& model, const TokenBatch& batch,
                          const std::vector<int>& labels, const std::string& task,
                          double eps) {
    if (!(eps > 0.0) || eps > 1e-2) throw InputError("eps must be in (0, 1e-2]");

    LossAndGrads analytic = loss_and_backward(model, batch, labels, task);

    BaseModel work = model;
    std::vector<std::pair<std::string, Tensor*>> params;
    for_each_param(work, [&](const std::string& id, Tensor& t) { params.emplace_back(id, &t); });
    std::map<std::string, const Tensor*> grad_of;
    for_each_param(analytic.grads,
                   [&](const std::string& id, const Tensor& t) { grad_of.emplace(id, &t); });

    const std::size_t per_tensor =
        std::max<std::size_t>(2, (200 + params.size() - 1) / params.size());

    auto loss_only = [&]() {
        const Tensor logits = detail::forward_core(work, nullptr, batch, task, nullptr);
        return detail::ce_loss_and_dlogits(logits, labels, work.spec.num_classes, nullptr);
    };

    double max_rel = 0.0;
    for (auto& [id, tensor] : params) {
        const Tensor* g = grad_of.at(id);
        // deterministic per-tensor index sample, keyed by the tensor id
        Rng rng(substream_seed(0x5eed, id));
        std::set<std::size_t> indices;
        while (indices.size() < std::min(per_tensor, tensor->size())) {
            indices.insert(static_cast<std::size_t>(rng.bounded(tensor->size())));
        }
        for (std::size_t idx : indices) {
            const double saved = tensor->data[idx];
            tensor->data[idx] = saved + eps;
            const double lp = loss_only();
            tensor->data[idx] = saved - eps;
            const double lm = loss_only();
            tensor->data[idx] = saved;
            const double fd = (lp - lm) / (2.0 * eps);
            const double an = g->data[idx];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

double evaluate(const BaseModel& model, const datagen::LabeledDataset& dataset,
                const std::string& task) {
    if (dataset.empty()) throw InputError("evaluate: empty dataset");
    const std::size_t chunk = 64;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < dataset.size(); start += chunk) {
        const std::size_t end = std::min(dataset.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        const TokenBatch batch = TokenBatch::from_examples(dataset.examples, idx);
        const Tensor logits = forward(model, batch, task);
        const std::size_t K = logits.cols();
        for (std::size_t b = 0; b < logits.rows(); ++b) {
            const double* row = logits.data.data() + b * K;
            std::size_t best = 0;
            for (std::size_t j = 1; j < K; ++j) {
                if (row[j] > row[best]) best = j;  // ties keep the lowest index
            }
            if (static_cast<int>(best) == dataset.examples[start + b].label) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

} // namespace fedbe::nn
