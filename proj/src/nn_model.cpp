#include "mct/nn/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mct/rng.hpp"

namespace mct::nn {

namespace {

constexpr double kLnEps = 1e-5;
const double kGeluC = std::sqrt(2.0 / std::numbers::pi);

void check_tokens(const ParamBuffer& params, const TokenSeq& tokens, int headroom = 0) {
    const auto& cfg = params.config();
    if (tokens.empty()) throw ContractError("token sequence must be nonempty");
    if (static_cast<int>(tokens.size()) + headroom > cfg.context_len) {
        throw ConfigError("sequence length " + std::to_string(tokens.size() + headroom) +
                          " exceeds context_len " + std::to_string(cfg.context_len));
    }
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab_size) {
            throw ContractError("token id " + std::to_string(t) + " out of vocab range");
        }
    }
}

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// y = (x - mean)/sqrt(var + eps) * g + b, per row. Stores xhat and rstd.
void layernorm(const RowMat& x, ConstMatMap g, ConstMatMap b, RowMat& xhat, RowMat& out,
               Eigen::VectorXd& rstd) {
    const auto T = x.rows();
    const auto D = x.cols();
    xhat.resize(T, D);
    out.resize(T, D);
    rstd.resize(T);
    for (Eigen::Index i = 0; i < T; ++i) {
        const double mean = x.row(i).mean();
        const double var = (x.row(i).array() - mean).square().mean();
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        rstd(i) = rs;
        xhat.row(i) = (x.row(i).array() - mean) * rs;
        out.row(i) = xhat.row(i).cwiseProduct(g.row(0)) + b.row(0);
    }
}

// Accumulates dx (+=), dg (+=), db (+=) given dy and the cached xhat/rstd.
void layernorm_backward(const RowMat& dy, const RowMat& xhat, const Eigen::VectorXd& rstd,
                        ConstMatMap g, RowMat& dx, MatMap dg, MatMap db) {
    const auto T = dy.rows();
    for (Eigen::Index i = 0; i < T; ++i) {
        Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(g.row(0));
        const double m1 = dxhat.mean();
        const double m2 = dxhat.cwiseProduct(xhat.row(i)).mean();
        dx.row(i) += rstd(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2).matrix();
        dg.row(0) += dy.row(i).cwiseProduct(xhat.row(i));
        db.row(0) += dy.row(i);
    }
}

inline double stable_logprob(const Eigen::VectorXd& logits, int target) {
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    return logits(target) - lse;
}

}  // namespace

std::vector<double> softmax(const Eigen::VectorXd& logits) {
    const double m = logits.maxCoeff();
    Eigen::ArrayXd e = (logits.array() - m).exp();
    e /= e.sum();
    return {e.data(), e.data() + e.size()};
}

RowMat forward_logits(const ParamBuffer& params, const TokenSeq& tokens, ForwardCache* cache) {
    check_tokens(params, tokens);
    const auto& cfg = params.config();
    const int T = static_cast<int>(tokens.size());
    const int D = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    auto tok_emb = params.mat("tok_emb");
    auto pos_emb = params.mat("pos_emb");

    RowMat x(T, D);
    for (int i = 0; i < T; ++i) {
        x.row(i) = tok_emb.row(tokens[i]) + pos_emb.row(i);
    }

    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    const bool keep = cache != nullptr;
    if (keep) {
        c.tokens = tokens;
        c.layer_in.clear();
        c.layers.assign(cfg.n_layers, LayerCache{});
    }

    RowMat ln1_xhat, ln1_out, ln2_xhat, ln2_out;
    Eigen::VectorXd ln1_rstd, ln2_rstd;

    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        if (keep) c.layer_in.push_back(x);
        LayerCache scratch;
        LayerCache& L = keep ? c.layers[l] : scratch;

        layernorm(x, params.mat(p + "ln1_g"), params.mat(p + "ln1_b"), L.ln1_xhat, L.ln1_out,
                  L.ln1_rstd);
        L.q = L.ln1_out * params.mat(p + "wq");
        L.q.rowwise() += params.mat(p + "bq").row(0);
        L.k = L.ln1_out * params.mat(p + "wk");
        L.k.rowwise() += params.mat(p + "bk").row(0);
        L.v = L.ln1_out * params.mat(p + "wv");
        L.v.rowwise() += params.mat(p + "bv").row(0);

        L.att.assign(H, RowMat());
        L.att_concat.resize(T, D);
        for (int h = 0; h < H; ++h) {
            auto Q = L.q.middleCols(h * dh, dh);
            auto K = L.k.middleCols(h * dh, dh);
            auto V = L.v.middleCols(h * dh, dh);
            RowMat S = Q * K.transpose() * inv_sqrt_dh;
            RowMat& P = L.att[h];
            P = RowMat::Zero(T, T);
            for (int i = 0; i < T; ++i) {
                const auto row = S.row(i).head(i + 1);
                const double m = row.maxCoeff();
                Eigen::ArrayXd e = (row.array() - m).exp();
                P.row(i).head(i + 1) = (e / e.sum()).matrix();
            }
            L.att_concat.middleCols(h * dh, dh) = P * V;
        }
        RowMat att_out = L.att_concat * params.mat(p + "wo");
        att_out.rowwise() += params.mat(p + "bo").row(0);
        L.x_mid = x + att_out;

        layernorm(L.x_mid, params.mat(p + "ln2_g"), params.mat(p + "ln2_b"), L.ln2_xhat, L.ln2_out,
                  L.ln2_rstd);
        L.ff_pre = L.ln2_out * params.mat(p + "w1");
        L.ff_pre.rowwise() += params.mat(p + "b1").row(0);
        L.ff_act = L.ff_pre.unaryExpr([](double v) { return gelu(v); });
        RowMat ff_out = L.ff_act * params.mat(p + "w2");
        ff_out.rowwise() += params.mat(p + "b2").row(0);
        x = L.x_mid + ff_out;

        if (!x.allFinite()) {
            throw NumericError("non-finite activation after layer " + std::to_string(l), l);
        }
    }

    if (keep) c.x_final = x;
    RowMat lnf_xhat, h;
    Eigen::VectorXd lnf_rstd;
    RowMat& xhat_ref = keep ? c.lnf_xhat : lnf_xhat;
    RowMat& h_ref = keep ? c.h : h;
    Eigen::VectorXd& rstd_ref = keep ? c.lnf_rstd : lnf_rstd;
    layernorm(x, params.mat("lnf_g"), params.mat("lnf_b"), xhat_ref, h_ref, rstd_ref);

    RowMat logits = h_ref * tok_emb.transpose();
    if (!logits.allFinite()) {
        throw NumericError("non-finite logits", cfg.n_layers);
    }
    return logits;
}

void backward(const ParamBuffer& params, const ForwardCache& cache, const RowMat& dlogits,
              GradientSet& grads) {
    const auto& cfg = params.config();
    const int T = static_cast<int>(cache.tokens.size());
    const int D = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    if (grads.data.size() != params.size()) throw ContractError("gradient/parameter shape mismatch");

    const ParamLayout& layout = params.layout();
    auto gmat = [&](const std::string& name) {
        const auto& e = layout.find(name);
        return MatMap(grads.data.data() + e.offset, e.rows, e.cols);
    };

    auto tok_emb = params.mat("tok_emb");

    // tied output head: logits = h * E^T
    RowMat dh_mat = dlogits * tok_emb;
    gmat("tok_emb").noalias() += dlogits.transpose() * cache.h;

    RowMat dx = RowMat::Zero(T, D);
    layernorm_backward(dh_mat, cache.lnf_xhat, cache.lnf_rstd, params.mat("lnf_g"), dx,
                       gmat("lnf_g"), gmat("lnf_b"));

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        const LayerCache& L = cache.layers[l];

        // MLP branch
        RowMat dff_out = dx;  // residual: dx also flows to x_mid below
        gmat(p + "w2").noalias() += L.ff_act.transpose() * dff_out;
        gmat(p + "b2").row(0) += dff_out.colwise().sum();
        RowMat dff_act = dff_out * params.mat(p + "w2").transpose();
        RowMat dff_pre =
            dff_act.cwiseProduct(L.ff_pre.unaryExpr([](double v) { return gelu_grad(v); }));
        gmat(p + "w1").noalias() += L.ln2_out.transpose() * dff_pre;
        gmat(p + "b1").row(0) += dff_pre.colwise().sum();
        RowMat dln2_out = dff_pre * params.mat(p + "w1").transpose();

        RowMat dx_mid = dx;
        layernorm_backward(dln2_out, L.ln2_xhat, L.ln2_rstd, params.mat(p + "ln2_g"), dx_mid,
                           gmat(p + "ln2_g"), gmat(p + "ln2_b"));

        // attention branch
        RowMat datt_out = dx_mid;
        gmat(p + "wo").noalias() += L.att_concat.transpose() * datt_out;
        gmat(p + "bo").row(0) += datt_out.colwise().sum();
        RowMat datt_concat = datt_out * params.mat(p + "wo").transpose();

        RowMat dq = RowMat::Zero(T, D), dk = RowMat::Zero(T, D), dv = RowMat::Zero(T, D);
        for (int h = 0; h < H; ++h) {
            auto Q = L.q.middleCols(h * dh, dh);
            auto K = L.k.middleCols(h * dh, dh);
            auto V = L.v.middleCols(h * dh, dh);
            const RowMat& P = L.att[h];
            auto dO = datt_concat.middleCols(h * dh, dh);

            RowMat dP = dO * V.transpose();
            dv.middleCols(h * dh, dh).noalias() += P.transpose() * dO;
            // softmax backward per row (masked entries have P = 0)
            RowMat dS(T, T);
            for (int i = 0; i < T; ++i) {
                const double dot = dP.row(i).cwiseProduct(P.row(i)).sum();
                dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
            }
            dq.middleCols(h * dh, dh).noalias() += dS * K * inv_sqrt_dh;
            dk.middleCols(h * dh, dh).noalias() += dS.transpose() * Q * inv_sqrt_dh;
        }

        gmat(p + "wq").noalias() += L.ln1_out.transpose() * dq;
        gmat(p + "bq").row(0) += dq.colwise().sum();
        gmat(p + "wk").noalias() += L.ln1_out.transpose() * dk;
        gmat(p + "bk").row(0) += dk.colwise().sum();
        gmat(p + "wv").noalias() += L.ln1_out.transpose() * dv;
        gmat(p + "bv").row(0) += dv.colwise().sum();

        RowMat dln1_out = dq * params.mat(p + "wq").transpose() +
                          dk * params.mat(p + "wk").transpose() +
                          dv * params.mat(p + "wv").transpose();
        RowMat dx_in = dx_mid;
        layernorm_backward(dln1_out, L.ln1_xhat, L.ln1_rstd, params.mat(p + "ln1_g"), dx_in,
                           gmat(p + "ln1_g"), gmat(p + "ln1_b"));
        dx = dx_in;
    }

    // embeddings
    auto dtok = gmat("tok_emb");
    auto dpos = gmat("pos_emb");
    for (int i = 0; i < T; ++i) {
        dtok.row(cache.tokens[i]) += dx.row(i);
        dpos.row(i) += dx.row(i);
    }
}

IncrementalModel::IncrementalModel(const ParamBuffer& params) : p_(params) {
    const auto& cfg = p_.config();
    kcache_.assign(cfg.n_layers, RowMat::Zero(cfg.context_len, cfg.d_model));
    vcache_.assign(cfg.n_layers, RowMat::Zero(cfg.context_len, cfg.d_model));
}

Eigen::VectorXd IncrementalModel::feed(int token) {
    const auto& cfg = p_.config();
    const int D = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    if (t_ >= cfg.context_len) throw ConfigError("incremental decode past context_len");
    if (token < 0 || token >= cfg.vocab_size) throw ContractError("token id out of vocab range");

    auto row_ln = [&](const Eigen::RowVectorXd& x, ConstMatMap g, ConstMatMap b) {
        const double mean = x.mean();
        const double var = (x.array() - mean).square().mean();
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        return (((x.array() - mean) * rs) * g.row(0).array() + b.row(0).array()).matrix().eval();
    };

    Eigen::RowVectorXd x = p_.mat("tok_emb").row(token) + p_.mat("pos_emb").row(t_);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Eigen::RowVectorXd a = row_ln(x, p_.mat(p + "ln1_g"), p_.mat(p + "ln1_b"));
        Eigen::RowVectorXd q = a * p_.mat(p + "wq") + p_.mat(p + "bq").row(0);
        kcache_[l].row(t_) = a * p_.mat(p + "wk") + p_.mat(p + "bk").row(0);
        vcache_[l].row(t_) = a * p_.mat(p + "wv") + p_.mat(p + "bv").row(0);

        Eigen::RowVectorXd att_concat(D);
        for (int h = 0; h < H; ++h) {
            auto K = kcache_[l].block(0, h * dh, t_ + 1, dh);
            auto V = vcache_[l].block(0, h * dh, t_ + 1, dh);
            Eigen::VectorXd s = K * q.segment(h * dh, dh).transpose() * inv_sqrt_dh;
            const double m = s.maxCoeff();
            Eigen::ArrayXd e = (s.array() - m).exp();
            Eigen::VectorXd prob = (e / e.sum()).matrix();
            att_concat.segment(h * dh, dh) = prob.transpose() * V;
        }
        Eigen::RowVectorXd att_out = att_concat * p_.mat(p + "wo") + p_.mat(p + "bo").row(0);
        Eigen::RowVectorXd x_mid = x + att_out;
        Eigen::RowVectorXd b = row_ln(x_mid, p_.mat(p + "ln2_g"), p_.mat(p + "ln2_b"));
        Eigen::RowVectorXd ff_pre = b * p_.mat(p + "w1") + p_.mat(p + "b1").row(0);
        Eigen::RowVectorXd ff_act = ff_pre.unaryExpr([](double v) { return gelu(v); });
        x = x_mid + ff_act * p_.mat(p + "w2") + p_.mat(p + "b2").row(0);
        if (!x.allFinite()) {
            throw NumericError("non-finite activation after layer " + std::to_string(l), l);
        }
    }
    Eigen::RowVectorXd h = row_ln(x, p_.mat("lnf_g"), p_.mat("lnf_b"));
    Eigen::VectorXd logits = p_.mat("tok_emb") * h.transpose();
    ++t_;
    return logits;
}

double sequence_logprob(const ParamBuffer& params, const TokenSeq& context,
                        const TokenSeq& continuation) {
    if (continuation.empty()) throw ContractError("sequence_logprob: empty continuation");
    TokenSeq full = context;
    full.insert(full.end(), continuation.begin(), continuation.end());
    check_tokens(params, full);
    const RowMat logits = forward_logits(params, full);
    const int n0 = static_cast<int>(context.size());
    double lp = 0.0;
    for (std::size_t i = 0; i < continuation.size(); ++i) {
        const int pos = n0 + static_cast<int>(i) - 1;
        if (pos < 0) throw ContractError("sequence_logprob: empty context");
        lp += stable_logprob(logits.row(pos).transpose(), continuation[i]);
    }
    return lp;
}

double sequence_logprob_backward(const ParamBuffer& params, const TokenSeq& context,
                                 const TokenSeq& continuation, double scale, GradientSet& grads) {
    if (continuation.empty()) throw ContractError("sequence_logprob: empty continuation");
    TokenSeq full = context;
    full.insert(full.end(), continuation.begin(), continuation.end());
    check_tokens(params, full);
    ForwardCache cache;
    const RowMat logits = forward_logits(params, full, &cache);
    const int T = static_cast<int>(full.size());
    const int n0 = static_cast<int>(context.size());
    if (n0 == 0) throw ContractError("sequence_logprob: empty context");

    RowMat dlogits = RowMat::Zero(T, params.config().vocab_size);
    double lp = 0.0;
    for (std::size_t i = 0; i < continuation.size(); ++i) {
        const int pos = n0 + static_cast<int>(i) - 1;
        const Eigen::VectorXd row = logits.row(pos).transpose();
        lp += stable_logprob(row, continuation[i]);
        const std::vector<double> probs = softmax(row);
        for (int v = 0; v < params.config().vocab_size; ++v) {
            dlogits(pos, v) = -scale * probs[v];
        }
        dlogits(pos, continuation[i]) += scale;
    }
    backward(params, cache, dlogits, grads);
    return lp;
}

std::vector<double> next_token_dist(const ParamBuffer& params, const TokenSeq& context) {
    check_tokens(params, context, 1);
    const RowMat logits = forward_logits(params, context);
    return softmax(logits.row(logits.rows() - 1).transpose());
}

namespace {

// Shared KL plumbing: fills per-position distributions for both models.
double kl_core(const ParamBuffer& pa, const ParamBuffer& pb, const TokenSeq& context,
               const TokenSeq& cot, GradientSet* grads, double scale) {
    if (pa.config().vocab_size != pb.config().vocab_size) {
        throw ContractError("kl_cot: vocab mismatch");
    }
    if (cot.empty()) return 0.0;
    TokenSeq full = context;
    full.insert(full.end(), cot.begin(), cot.end());
    check_tokens(pa, full);
    check_tokens(pb, full);
    if (context.empty()) throw ContractError("kl_cot: empty context");

    ForwardCache cache_a;
    const RowMat la = forward_logits(pa, full, grads ? &cache_a : nullptr);
    const RowMat lb = forward_logits(pb, full);
    const int V = pa.config().vocab_size;
    const int n0 = static_cast<int>(context.size());

    RowMat dlogits;
    if (grads) dlogits = RowMat::Zero(static_cast<int>(full.size()), V);

    double total = 0.0;
    for (std::size_t i = 0; i < cot.size(); ++i) {
        const int pos = n0 + static_cast<int>(i) - 1;
        std::vector<double> qa = softmax(la.row(pos).transpose());
        std::vector<double> qb = softmax(lb.row(pos).transpose());
        for (int v = 0; v < V; ++v) {
            qa[v] = std::max(qa[v], 1e-300);
            qb[v] = std::max(qb[v], 1e-300);
        }
        double kl = 0.0;
        for (int v = 0; v < V; ++v) {
            kl += qa[v] * (std::log(qa[v]) - std::log(qb[v]));
        }
        total += kl;
        if (grads) {
            for (int v = 0; v < V; ++v) {
                dlogits(pos, v) = scale * qa[v] * (std::log(qa[v]) - std::log(qb[v]) - kl);
            }
        }
    }
    if (grads) backward(pa, cache_a, dlogits, *grads);
    return total;
}

}  // namespace

double kl_cot(const ParamBuffer& params_a, const ParamBuffer& params_b, const TokenSeq& context,
              const TokenSeq& cot) {
    return kl_core(params_a, params_b, context, cot, nullptr, 0.0);
}

double kl_cot_backward(const ParamBuffer& params_a, const ParamBuffer& params_b,
                       const TokenSeq& context, const TokenSeq& cot, double scale,
                       GradientSet& grads) {
    return kl_core(params_a, params_b, context, cot, &grads, scale);
}

TokenSeq sample_continuation(const ParamBuffer& params, const TokenSeq& context, int max_len,
                             double temperature, std::optional<int> stop_token,
                             std::uint64_t seed) {
    if (max_len < 0) throw ContractError("sample_continuation: negative max_len");
    if (temperature < 0.0) throw ContractError("sample_continuation: negative temperature");
    check_tokens(params, context, max_len);
    TokenSeq out;
    if (max_len == 0) return out;

    IncrementalModel inc(params);
    Eigen::VectorXd logits;
    for (int t : context) logits = inc.feed(t);

    Rng rng(seed);
    for (int i = 0; i < max_len; ++i) {
        int tok;
        if (temperature == 0.0) {
            Eigen::Index best;
            logits.maxCoeff(&best);
            tok = static_cast<int>(best);
        } else {
            const std::vector<double> probs = softmax(logits / temperature);
            tok = rng.next_categorical(probs);
        }
        if (stop_token && tok == *stop_token) break;
        out.push_back(tok);
        if (i + 1 < max_len) logits = inc.feed(tok);
    }
    return out;
}

}  // namespace mct::nn
