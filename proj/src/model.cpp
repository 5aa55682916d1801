// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "mgrec/nn.hpp"
#include "mgrec/seqrec.hpp"

namespace mgrec {

void ModelConfig::validate() const {
    if (width < 1 || heads < 1 || width % heads != 0) {
        throw ConfigError("model: width must be a positive multiple of heads");
    }
    if (enc_layers < 1 || dec_layers < 1) throw ConfigError("model: need >= 1 layer per stack");
    if (ff < 1) throw ConfigError("model: ff width must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0, 1)");
    if (vocab_size < 4) throw ConfigError("model: vocab_size must cover the special tokens");
    if (max_source_len < 2 || max_target_len < 2) throw ConfigError("model: lengths too small");
}

int ParamStore::add(std::string name, Eigen::Index rows, Eigen::Index cols, bool decay) {
    Tensor t;
    t.name = std::move(name);
    t.value = Matrix::Zero(rows, cols);
    t.grad = Matrix::Zero(rows, cols);
    t.decay = decay;
    tensors_.push_back(std::move(t));
    return static_cast<int>(tensors_.size()) - 1;
}

void ParamStore::zero_grads() {
    for (Tensor& t : tensors_) t.grad.setZero();
}

std::size_t ParamStore::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& t : tensors_) n += static_cast<std::size_t>(t.value.size());
    return n;
}

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kMaskValue = -1e30;

struct Offsets {
    std::vector<Eigen::Index> start, len;
    Eigen::Index total = 0;
    void push(Eigen::Index l) {
        start.push_back(total);
        len.push_back(l);
        total += l;
    }
    std::size_t count() const { return len.size(); }
};

struct LnCache {
    Matrix xhat;
    Vector inv_std;
};

struct DropCache {
    Matrix mask;
    bool active = false;
};

struct AttnCache {
    Matrix aq_in, akv_in;
    Matrix q, k, v;
    std::vector<std::vector<Matrix>> probs;  // [sequence][head]
    Matrix concat;
};

struct FfCache {
    Matrix in, pre, act;
};

struct EncLayerCache {
    LnCache ln1;
    AttnCache attn;
    DropCache drop1;
    LnCache ln2;
    FfCache ff;
    DropCache drop2;
};

struct DecLayerCache {
    LnCache ln1;
    AttnCache self_attn;
    DropCache drop1;
    LnCache ln2;
    AttnCache cross;
    DropCache drop2;
    LnCache ln3;
    FfCache ff;
    DropCache drop3;
};

struct ForwardCache {
    Offsets src_off, tgt_off;
    DropCache enc_drop0, dec_drop0;
    std::vector<EncLayerCache> enc_layers;
    LnCache enc_final;
    Matrix memory;
    std::vector<DecLayerCache> dec_layers;
    LnCache dec_final;
    Matrix dec_out;
};

Matrix ln_forward(const Tensor& gain, const Tensor& bias, const Matrix& x, LnCache& c) {
    const Eigen::Index rows = x.rows(), d = x.cols();
    c.xhat.resize(rows, d);
    c.inv_std.resize(rows);
    Matrix y(rows, d);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const double mu = x.row(r).mean();
        const RowVector centered = x.row(r).array() - mu;
        const double var = centered.squaredNorm() / static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        c.inv_std[r] = inv;
        c.xhat.row(r) = centered * inv;
        y.row(r) = c.xhat.row(r).cwiseProduct(gain.value.row(0)) + bias.value.row(0);
    }
    return y;
}

Matrix ln_backward(Tensor& gain, Tensor& bias, const LnCache& c, const Matrix& dy) {
    const Eigen::Index rows = dy.rows(), d = dy.cols();
    Matrix dx(rows, d);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const RowVector dxhat = dy.row(r).cwiseProduct(gain.value.row(0));
        const double m1 = dxhat.mean();
        const double m2 = dxhat.cwiseProduct(c.xhat.row(r)).mean();
        dx.row(r) = c.inv_std[r] * (dxhat.array() - m1 - c.xhat.row(r).array() * m2).matrix();
    }
    gain.grad.row(0) += dy.cwiseProduct(c.xhat).colwise().sum();
    bias.grad.row(0) += dy.colwise().sum();
    return dx;
}

Matrix dropout_forward(const Matrix& x, double p, bool train, Rng* rng, DropCache& c) {
    if (!train || p <= 0.0 || rng == nullptr) {
        c.active = false;
        return x;
    }
    c.active = true;
    c.mask.resize(x.rows(), x.cols());
    const double scale = 1.0 / (1.0 - p);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (Eigen::Index col = 0; col < x.cols(); ++col) {
            c.mask(r, col) = rng->uniform() >= p ? scale : 0.0;
        }
    }
    return x.cwiseProduct(c.mask);
}

Matrix dropout_backward(const DropCache& c, const Matrix& dy) {
    if (!c.active) return dy;
    return dy.cwiseProduct(c.mask);
}

Matrix attn_forward(ParamStore& params, const Seq2SeqModel::AttnRef& ref, const Matrix& aq,
                    const Matrix& akv, const Offsets& qo, const Offsets& ko, bool causal,
                    int heads, AttnCache& c) {
    const Eigen::Index d = aq.cols();
    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    c.aq_in = aq;
    c.akv_in = akv;
    c.q = aq * params[ref.wq].value;
    c.q.rowwise() += params[ref.bq].value.row(0);
    c.k = akv * params[ref.wk].value;
    c.k.rowwise() += params[ref.bk].value.row(0);
    c.v = akv * params[ref.wv].value;
    c.v.rowwise() += params[ref.bv].value.row(0);

    c.concat.resize(aq.rows(), d);
    c.probs.assign(qo.count(), {});
    for (std::size_t s = 0; s < qo.count(); ++s) {
        const Eigen::Index qs = qo.start[s], ql = qo.len[s];
        const Eigen::Index ks = ko.start[s], kl = ko.len[s];
        c.probs[s].reserve(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            const auto qh = c.q.middleRows(qs, ql).middleCols(h * dh, dh);
            const auto kh = c.k.middleRows(ks, kl).middleCols(h * dh, dh);
            const auto vh = c.v.middleRows(ks, kl).middleCols(h * dh, dh);
            Matrix scores = (qh * kh.transpose()) * scale;
            if (causal) {
                for (Eigen::Index i = 0; i < ql; ++i) {
                    for (Eigen::Index j = i + 1; j < kl; ++j) scores(i, j) = kMaskValue;
                }
            }
            softmax_rows(scores);
            c.concat.middleRows(qs, ql).middleCols(h * dh, dh) = scores * vh;
            c.probs[s].push_back(std::move(scores));
        }
    }
    Matrix out = c.concat * params[ref.wo].value;
    out.rowwise() += params[ref.bo].value.row(0);
    return out;
}

/// Returns (d_aq, d_akv).
std::pair<Matrix, Matrix> attn_backward(ParamStore& params, const Seq2SeqModel::AttnRef& ref,
                                        const Offsets& qo, const Offsets& ko, int heads,
                                        const AttnCache& c, const Matrix& d_out) {
    const Eigen::Index d = c.q.cols();
    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    params[ref.wo].grad += c.concat.transpose() * d_out;
    params[ref.bo].grad.row(0) += d_out.colwise().sum();
    const Matrix d_concat = d_out * params[ref.wo].value.transpose();

    Matrix dq = Matrix::Zero(c.q.rows(), d);
    Matrix dk = Matrix::Zero(c.k.rows(), d);
    Matrix dv = Matrix::Zero(c.v.rows(), d);

    for (std::size_t s = 0; s < qo.count(); ++s) {
        const Eigen::Index qs = qo.start[s], ql = qo.len[s];
        const Eigen::Index ks = ko.start[s], kl = ko.len[s];
        for (int h = 0; h < heads; ++h) {
            const Matrix& p = c.probs[s][static_cast<std::size_t>(h)];
            const auto qh = c.q.middleRows(qs, ql).middleCols(h * dh, dh);
            const auto kh = c.k.middleRows(ks, kl).middleCols(h * dh, dh);
            const auto vh = c.v.middleRows(ks, kl).middleCols(h * dh, dh);
            const auto d_oh = d_concat.middleRows(qs, ql).middleCols(h * dh, dh);

            const Matrix dp = d_oh * vh.transpose();
            dv.middleRows(ks, kl).middleCols(h * dh, dh) += p.transpose() * d_oh;

            Matrix ds(ql, kl);
            for (Eigen::Index r = 0; r < ql; ++r) {
                const double row_dot = dp.row(r).cwiseProduct(p.row(r)).sum();
                ds.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - row_dot).matrix());
            }
            dq.middleRows(qs, ql).middleCols(h * dh, dh) += (ds * kh) * scale;
            dk.middleRows(ks, kl).middleCols(h * dh, dh) += (ds.transpose() * qh) * scale;
        }
    }

    params[ref.wq].grad += c.aq_in.transpose() * dq;
    params[ref.bq].grad.row(0) += dq.colwise().sum();
    params[ref.wk].grad += c.akv_in.transpose() * dk;
    params[ref.bk].grad.row(0) += dk.colwise().sum();
    params[ref.wv].grad += c.akv_in.transpose() * dv;
    params[ref.bv].grad.row(0) += dv.colwise().sum();

    Matrix d_aq = dq * params[ref.wq].value.transpose();
    Matrix d_akv = dk * params[ref.wk].value.transpose() + dv * params[ref.wv].value.transpose();
    return {std::move(d_aq), std::move(d_akv)};
}

Matrix ff_forward(ParamStore& params, const Seq2SeqModel::FfRef& ref, const Matrix& in,
                  FfCache& c) {
    c.in = in;
    c.pre = in * params[ref.w1].value;
    c.pre.rowwise() += params[ref.b1].value.row(0);
    c.act = gelu(c.pre);
    Matrix out = c.act * params[ref.w2].value;
    out.rowwise() += params[ref.b2].value.row(0);
    return out;
}

Matrix ff_backward(ParamStore& params, const Seq2SeqModel::FfRef& ref, const FfCache& c,
                   const Matrix& d_out) {
    params[ref.w2].grad += c.act.transpose() * d_out;
    params[ref.b2].grad.row(0) += d_out.colwise().sum();
    const Matrix d_act = d_out * params[ref.w2].value.transpose();
    const Matrix d_pre = d_act.cwiseProduct(gelu_grad(c.pre));
    params[ref.w1].grad += c.in.transpose() * d_pre;
    params[ref.b1].grad.row(0) += d_pre.colwise().sum();
    return d_pre * params[ref.w1].value.transpose();
}

}  // namespace

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

struct ModelOps {
    static Matrix embed(const Seq2SeqModel& m, const std::vector<std::vector<int>>& seqs,
                        const Offsets& off) {
        const Eigen::Index d = m.config_.width;
        const double scale = std::sqrt(static_cast<double>(d));
        const Matrix& emb = m.params_[m.embedding_].value;
        Matrix x(off.total, d);
        for (std::size_t s = 0; s < seqs.size(); ++s) {
            for (Eigen::Index i = 0; i < off.len[s]; ++i) {
                const int token = seqs[s][static_cast<std::size_t>(i)];
                if (token < 0 || token >= m.config_.vocab_size) {
                    throw Error("token id " + std::to_string(token) + " out of vocabulary");
                }
                x.row(off.start[s] + i) = emb.row(token) * scale + m.positions_.row(i);
            }
        }
        return x;
    }

    static void embed_backward(Seq2SeqModel& m, const std::vector<std::vector<int>>& seqs,
                               const Offsets& off, const Matrix& dx) {
        const double scale = std::sqrt(static_cast<double>(m.config_.width));
        Matrix& grad = m.params_[m.embedding_].grad;
        for (std::size_t s = 0; s < seqs.size(); ++s) {
            for (Eigen::Index i = 0; i < off.len[s]; ++i) {
                grad.row(seqs[s][static_cast<std::size_t>(i)]) += dx.row(off.start[s] + i) * scale;
            }
        }
    }

    static Matrix encoder_forward(Seq2SeqModel& m, const std::vector<std::vector<int>>& src,
                                  ForwardCache& fc, bool train, Rng* rng) {
        ParamStore& P = m.params_;
        Matrix x = embed(m, src, fc.src_off);
        x = dropout_forward(x, m.config_.dropout, train, rng, fc.enc_drop0);
        fc.enc_layers.resize(m.enc_layers_.size());
        for (std::size_t l = 0; l < m.enc_layers_.size(); ++l) {
            const auto& ref = m.enc_layers_[l];
            EncLayerCache& lc = fc.enc_layers[l];
            const Matrix n1 = ln_forward(P[ref.ln1.gain], P[ref.ln1.bias], x, lc.ln1);
            const Matrix a = attn_forward(P, ref.attn, n1, n1, fc.src_off, fc.src_off,
                                          /*causal=*/false, m.config_.heads, lc.attn);
            x += dropout_forward(a, m.config_.dropout, train, rng, lc.drop1);
            const Matrix n2 = ln_forward(P[ref.ln2.gain], P[ref.ln2.bias], x, lc.ln2);
            const Matrix f = ff_forward(P, ref.ff, n2, lc.ff);
            x += dropout_forward(f, m.config_.dropout, train, rng, lc.drop2);
        }
        fc.memory = ln_forward(P[m.enc_final_.gain], P[m.enc_final_.bias], x, fc.enc_final);
        return fc.memory;
    }

    static Matrix decoder_forward(Seq2SeqModel& m, const std::vector<std::vector<int>>& dec_in,
                                  ForwardCache& fc, bool train, Rng* rng) {
        ParamStore& P = m.params_;
        Matrix y = embed(m, dec_in, fc.tgt_off);
        y = dropout_forward(y, m.config_.dropout, train, rng, fc.dec_drop0);
        fc.dec_layers.resize(m.dec_layers_.size());
        for (std::size_t l = 0; l < m.dec_layers_.size(); ++l) {
            const auto& ref = m.dec_layers_[l];
            DecLayerCache& lc = fc.dec_layers[l];
            const Matrix n1 = ln_forward(P[ref.ln1.gain], P[ref.ln1.bias], y, lc.ln1);
            const Matrix a = attn_forward(P, ref.self_attn, n1, n1, fc.tgt_off, fc.tgt_off,
                                          /*causal=*/true, m.config_.heads, lc.self_attn);
            y += dropout_forward(a, m.config_.dropout, train, rng, lc.drop1);
            const Matrix n2 = ln_forward(P[ref.ln2.gain], P[ref.ln2.bias], y, lc.ln2);
            const Matrix cr = attn_forward(P, ref.cross_attn, n2, fc.memory, fc.tgt_off,
                                           fc.src_off, /*causal=*/false, m.config_.heads,
                                           lc.cross);
            y += dropout_forward(cr, m.config_.dropout, train, rng, lc.drop2);
            const Matrix n3 = ln_forward(P[ref.ln3.gain], P[ref.ln3.bias], y, lc.ln3);
            const Matrix f = ff_forward(P, ref.ff, n3, lc.ff);
            y += dropout_forward(f, m.config_.dropout, train, rng, lc.drop3);
        }
        fc.dec_out = ln_forward(P[m.dec_final_.gain], P[m.dec_final_.bias], y, fc.dec_final);
        return fc.dec_out;
    }

    static void backward(Seq2SeqModel& m, const std::vector<std::vector<int>>& src,
                         const std::vector<std::vector<int>>& dec_in, ForwardCache& fc,
                         const Matrix& d_dec_out) {
        ParamStore& P = m.params_;
        Matrix dy = ln_backward(P[m.dec_final_.gain], P[m.dec_final_.bias], fc.dec_final,
                                d_dec_out);
        Matrix d_memory = Matrix::Zero(fc.memory.rows(), fc.memory.cols());
        for (std::size_t l = m.dec_layers_.size(); l-- > 0;) {
            const auto& ref = m.dec_layers_[l];
            DecLayerCache& lc = fc.dec_layers[l];
            {
                const Matrix d_f = dropout_backward(lc.drop3, dy);
                const Matrix d_n3 = ff_backward(P, ref.ff, lc.ff, d_f);
                dy += ln_backward(P[ref.ln3.gain], P[ref.ln3.bias], lc.ln3, d_n3);
            }
            {
                const Matrix d_cr = dropout_backward(lc.drop2, dy);
                auto [d_n2, d_mem] = attn_backward(P, ref.cross_attn, fc.tgt_off, fc.src_off,
                                                   m.config_.heads, lc.cross, d_cr);
                d_memory += d_mem;
                dy += ln_backward(P[ref.ln2.gain], P[ref.ln2.bias], lc.ln2, d_n2);
            }
            {
                const Matrix d_a = dropout_backward(lc.drop1, dy);
                auto [d_q, d_kv] = attn_backward(P, ref.self_attn, fc.tgt_off, fc.tgt_off,
                                                 m.config_.heads, lc.self_attn, d_a);
                const Matrix d_n1 = d_q + d_kv;
                dy += ln_backward(P[ref.ln1.gain], P[ref.ln1.bias], lc.ln1, d_n1);
            }
        }
        dy = dropout_backward(fc.dec_drop0, dy);
        embed_backward(m, dec_in, fc.tgt_off, dy);

        Matrix dx = ln_backward(P[m.enc_final_.gain], P[m.enc_final_.bias], fc.enc_final,
                                d_memory);
        for (std::size_t l = m.enc_layers_.size(); l-- > 0;) {
            const auto& ref = m.enc_layers_[l];
            EncLayerCache& lc = fc.enc_layers[l];
            {
                const Matrix d_f = dropout_backward(lc.drop2, dx);
                const Matrix d_n2 = ff_backward(P, ref.ff, lc.ff, d_f);
                dx += ln_backward(P[ref.ln2.gain], P[ref.ln2.bias], lc.ln2, d_n2);
            }
            {
                const Matrix d_a = dropout_backward(lc.drop1, dx);
                auto [d_q, d_kv] = attn_backward(P, ref.attn, fc.src_off, fc.src_off,
                                                 m.config_.heads, lc.attn, d_a);
                const Matrix d_n1 = d_q + d_kv;
                dx += ln_backward(P[ref.ln1.gain], P[ref.ln1.bias], lc.ln1, d_n1);
            }
        }
        dx = dropout_backward(fc.enc_drop0, dx);
        embed_backward(m, src, fc.src_off, dx);
    }
};

// ---------------------------------------------------------------------------
// Seq2SeqModel
// ---------------------------------------------------------------------------

Seq2SeqModel::Seq2SeqModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    build(/*init=*/true);
}

void Seq2SeqModel::build(bool init) {
    const int d = config_.width;
    auto add_ln = [this, d](const std::string& name) {
        LnRef ref;
        ref.gain = params_.add(name + ".gain", 1, d, false);
        ref.bias = params_.add(name + ".bias", 1, d, false);
        params_[ref.gain].value.setOnes();
        return ref;
    };
    auto add_attn = [this, d](const std::string& name) {
        AttnRef ref;
        ref.wq = params_.add(name + ".wq", d, d, true);
        ref.bq = params_.add(name + ".bq", 1, d, false);
        ref.wk = params_.add(name + ".wk", d, d, true);
        ref.bk = params_.add(name + ".bk", 1, d, false);
        ref.wv = params_.add(name + ".wv", d, d, true);
        ref.bv = params_.add(name + ".bv", 1, d, false);
        ref.wo = params_.add(name + ".wo", d, d, true);
        ref.bo = params_.add(name + ".bo", 1, d, false);
        return ref;
    };
    auto add_ff = [this, d](const std::string& name) {
        FfRef ref;
        ref.w1 = params_.add(name + ".w1", d, config_.ff, true);
        ref.b1 = params_.add(name + ".b1", 1, config_.ff, false);
        ref.w2 = params_.add(name + ".w2", config_.ff, d, true);
        ref.b2 = params_.add(name + ".b2", 1, d, false);
        return ref;
    };

    embedding_ = params_.add("embedding", config_.vocab_size, d, true);
    for (int l = 0; l < config_.enc_layers; ++l) {
        const std::string base = "enc." + std::to_string(l);
        EncLayerRef ref;
        ref.ln1 = add_ln(base + ".ln1");
        ref.attn = add_attn(base + ".attn");
        ref.ln2 = add_ln(base + ".ln2");
        ref.ff = add_ff(base + ".ff");
        enc_layers_.push_back(ref);
    }
    enc_final_ = add_ln("enc.final");
    for (int l = 0; l < config_.dec_layers; ++l) {
        const std::string base = "dec." + std::to_string(l);
        DecLayerRef ref;
        ref.ln1 = add_ln(base + ".ln1");
        ref.self_attn = add_attn(base + ".self");
        ref.ln2 = add_ln(base + ".ln2");
        ref.cross_attn = add_attn(base + ".cross");
        ref.ln3 = add_ln(base + ".ln3");
        ref.ff = add_ff(base + ".ff");
        dec_layers_.push_back(ref);
    }
    dec_final_ = add_ln("dec.final");
    // Zero-initialized head: an untrained model scores every token equally.
    out_w_ = params_.add("out.w", d, config_.vocab_size, true);
    out_b_ = params_.add("out.b", 1, config_.vocab_size, false);

    if (init) {
        Rng init_rng(Rng::splitmix64(config_.seed ^ 0x5E92ULL));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& t = params_[static_cast<int>(i)];
            const bool is_weight = t.decay && t.name != "out.w";
            if (t.name == "embedding") {
                const double std = 1.0 / std::sqrt(static_cast<double>(d));
                for (Eigen::Index r = 0; r < t.value.rows(); ++r)
                    for (Eigen::Index c = 0; c < t.value.cols(); ++c)
                        t.value(r, c) = init_rng.normal(0.0, std);
            } else if (is_weight) {
                const double std =
                    std::sqrt(2.0 / static_cast<double>(t.value.rows() + t.value.cols()));
                for (Eigen::Index r = 0; r < t.value.rows(); ++r)
                    for (Eigen::Index c = 0; c < t.value.cols(); ++c)
                        t.value(r, c) = init_rng.normal(0.0, std);
            }
        }
    }

    const int max_pos = std::max(config_.max_source_len, config_.max_target_len) + 1;
    positions_.resize(max_pos, d);
    for (int p = 0; p < max_pos; ++p) {
        for (int i = 0; i < d; i += 2) {
            const double angle = p / std::pow(10000.0, static_cast<double>(i) / d);
            positions_(p, i) = std::sin(angle);
            if (i + 1 < d) positions_(p, i + 1) = std::cos(angle);
        }
    }
}

double Seq2SeqModel::forward_loss(const std::vector<const SequenceExample*>& batch, bool train,
                                  Rng* dropout_rng) {
    if (batch.empty()) throw Error("forward_loss: empty batch");
    ForwardCache fc;
    std::vector<std::vector<int>> src, dec_in, labels;
    src.reserve(batch.size());
    for (const SequenceExample* ex : batch) {
        if (ex->target.empty()) throw Error("forward_loss: example with empty target");
        if (static_cast<int>(ex->source.size()) > config_.max_source_len) {
            throw Error("forward_loss: source longer than max_source_len");
        }
        if (static_cast<int>(ex->target.size()) > config_.max_target_len) {
            throw Error("forward_loss: target longer than max_target_len");
        }
        src.push_back(ex->source);
        std::vector<int> d_in;
        d_in.reserve(ex->target.size());
        d_in.push_back(1 /* BOS */);
        d_in.insert(d_in.end(), ex->target.begin(), ex->target.end() - 1);
        dec_in.push_back(std::move(d_in));
        labels.push_back(ex->target);
        fc.src_off.push(static_cast<Eigen::Index>(ex->source.size()));
        fc.tgt_off.push(static_cast<Eigen::Index>(ex->target.size()));
    }

    ModelOps::encoder_forward(*this, src, fc, train, dropout_rng);
    ModelOps::decoder_forward(*this, dec_in, fc, train, dropout_rng);

    Matrix logits = fc.dec_out * params_[out_w_].value;
    logits.rowwise() += params_[out_b_].value.row(0);

    // Mean cross-entropy over non-PAD labels; dLogits = (softmax - onehot)/M.
    Eigen::Index n_labels = 0;
    for (std::size_t s = 0; s < labels.size(); ++s) {
        for (int label : labels[s]) {
            if (label != 0 /* PAD */) ++n_labels;
        }
    }
    if (n_labels == 0) throw Error("forward_loss: no unmasked target tokens");

    double loss = 0.0;
    Matrix d_logits;
    if (train) d_logits = Matrix::Zero(logits.rows(), logits.cols());
    for (std::size_t s = 0; s < labels.size(); ++s) {
        for (std::size_t i = 0; i < labels[s].size(); ++i) {
            const int label = labels[s][i];
            const Eigen::Index row = fc.tgt_off.start[s] + static_cast<Eigen::Index>(i);
            if (label == 0) continue;
            const Vector lsm = log_softmax(logits.row(row).transpose());
            loss -= lsm[label];
            if (train) {
                d_logits.row(row) = lsm.array().exp().matrix().transpose() /
                                    static_cast<double>(n_labels);
                d_logits(row, label) -= 1.0 / static_cast<double>(n_labels);
            }
        }
    }
    loss /= static_cast<double>(n_labels);

    if (train) {
        params_[out_w_].grad += fc.dec_out.transpose() * d_logits;
        params_[out_b_].grad.row(0) += d_logits.colwise().sum();
        const Matrix d_dec_out = d_logits * params_[out_w_].value.transpose();
        ModelOps::backward(*this, src, dec_in, fc, d_dec_out);
    }
    return loss;
}

Seq2SeqModel::Encoded Seq2SeqModel::encode(const std::vector<int>& source) const {
    if (static_cast<int>(source.size()) > config_.max_source_len) {
        throw Error("encode: source longer than max_source_len");
    }
    auto& self = const_cast<Seq2SeqModel&>(*this);
    ForwardCache fc;
    fc.src_off.push(static_cast<Eigen::Index>(source.size()));
    Encoded enc;
    enc.memory = ModelOps::encoder_forward(self, {source}, fc, /*train=*/false, nullptr);
    return enc;
}

Vector Seq2SeqModel::next_token_logprobs(const Encoded& enc, const std::vector<int>& prefix) const {
    auto& self = const_cast<Seq2SeqModel&>(*this);
    ForwardCache fc;
    fc.src_off.push(enc.memory.rows());
    fc.memory = enc.memory;
    std::vector<int> dec_in;
    dec_in.reserve(prefix.size() + 1);
    dec_in.push_back(1 /* BOS */);
    dec_in.insert(dec_in.end(), prefix.begin(), prefix.end());
    if (static_cast<int>(dec_in.size()) > config_.max_target_len) {
        throw Error("next_token_logprobs: prefix longer than max_target_len");
    }
    fc.tgt_off.push(static_cast<Eigen::Index>(dec_in.size()));
    // Decoder only; the encoder memory is supplied by the caller.
    const Matrix dec_out = ModelOps::decoder_forward(self, {dec_in}, fc, /*train=*/false, nullptr);
    Vector logits = (dec_out.row(dec_out.rows() - 1) * params_[out_w_].value).transpose();
    logits += params_[out_b_].value.row(0).transpose();
    return log_softmax(logits);
}

std::vector<int> Seq2SeqModel::teacher_forced_argmax(const Encoded& enc,
                                                     const std::vector<int>& target) const {
    if (target.empty()) return {};
    auto& self = const_cast<Seq2SeqModel&>(*this);
    ForwardCache fc;
    fc.src_off.push(enc.memory.rows());
    fc.memory = enc.memory;
    std::vector<int> dec_in;
    dec_in.reserve(target.size());
    dec_in.push_back(1 /* BOS */);
    dec_in.insert(dec_in.end(), target.begin(), target.end() - 1);
    fc.tgt_off.push(static_cast<Eigen::Index>(dec_in.size()));
    const Matrix dec_out = ModelOps::decoder_forward(self, {dec_in}, fc, /*train=*/false, nullptr);
    Matrix logits = dec_out * params_[out_w_].value;
    logits.rowwise() += params_[out_b_].value.row(0);
    std::vector<int> argmax(target.size());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index best = 0;
        logits.row(r).maxCoeff(&best);
        argmax[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return argmax;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string Seq2SeqModel::payload() const {
    io::Writer w;
    w.put_i32(config_.enc_layers);
    w.put_i32(config_.dec_layers);
    w.put_i32(config_.heads);
    w.put_i32(config_.width);
    w.put_i32(config_.ff);
    w.put_f64(config_.dropout);
    w.put_i32(config_.max_source_len);
    w.put_i32(config_.max_target_len);
    w.put_i32(config_.vocab_size);
    w.put_u64(config_.seed);
    w.put_u32(static_cast<std::uint32_t>(params_.size()));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const Tensor& t = params_[static_cast<int>(i)];
        w.put_string(t.name);
        w.put_matrix(t.value);
    }
    return w.bytes();
}

Seq2SeqModel Seq2SeqModel::from_payload(const std::string& payload) {
    io::Reader r(payload);
    ModelConfig config;
    config.enc_layers = r.get_i32();
    config.dec_layers = r.get_i32();
    config.heads = r.get_i32();
    config.width = r.get_i32();
    config.ff = r.get_i32();
    config.dropout = r.get_f64();
    config.max_source_len = r.get_i32();
    config.max_target_len = r.get_i32();
    config.vocab_size = r.get_i32();
    config.seed = r.get_u64();
    Seq2SeqModel model(config);
    const std::uint32_t n = r.get_u32();
    if (n != model.params_.size()) {
        throw CorruptFileError("model checkpoint has " + std::to_string(n) + " tensors, expected " +
                               std::to_string(model.params_.size()));
    }
    for (std::uint32_t i = 0; i < n; ++i) {
        Tensor& t = model.params_[static_cast<int>(i)];
        const std::string name = r.get_string();
        if (name != t.name) {
            throw CorruptFileError("model checkpoint tensor '" + name + "' does not match '" +
                                   t.name + "'");
        }
        Matrix value = r.get_matrix();
        if (value.rows() != t.value.rows() || value.cols() != t.value.cols()) {
            throw CorruptFileError("model checkpoint tensor '" + name + "' has wrong shape");
        }
        t.value = std::move(value);
    }
    return model;
}

void save_model(const Seq2SeqModel& model, const std::string& path) {
    io::save_checkpoint(path, "model", model.payload());
}

Seq2SeqModel load_model(const std::string& path) {
    return Seq2SeqModel::from_payload(io::load_checkpoint(path, "model"));
}

}  // namespace mgrec
