// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <iostream>
#include <numeric>

#include "mgrec/nn.hpp"
#include "mgrec/quant.hpp"

namespace mgrec {

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Matrix xavier(int rows, int cols, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(rows + cols));
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal(0.0, std);
    return m;
}

/// x -> W1 -> gelu -> W2 -> gelu -> W3 (linear last layer).
Matrix mlp_forward(const std::vector<Matrix>& ws, const std::vector<Vector>& bs, const Matrix& in,
                   std::vector<Matrix>& pre, std::vector<Matrix>& act) {
    pre.clear();
    act.clear();
    Matrix h = in;
    for (std::size_t l = 0; l < ws.size(); ++l) {
        Matrix p = h * ws[l];
        p.rowwise() += bs[l].transpose();
        pre.push_back(p);
        if (l + 1 < ws.size()) {
            h = gelu(p);
            act.push_back(h);
        } else {
            h = std::move(p);
        }
    }
    return h;
}

/// Returns the gradient with respect to the input; fills weight/bias grads.
Matrix mlp_backward(const std::vector<Matrix>& ws, const Matrix& in,
                    const std::vector<Matrix>& pre, const std::vector<Matrix>& act,
                    const Matrix& d_out, std::vector<Matrix>& gw, std::vector<Vector>& gb) {
    gw.assign(ws.size(), Matrix());
    gb.assign(ws.size(), Vector());
    Matrix d = d_out;
    for (std::size_t l = ws.size(); l-- > 0;) {
        const Matrix& input = (l == 0) ? in : act[l - 1];
        gw[l] = input.transpose() * d;
        gb[l] = d.colwise().sum().transpose();
        Matrix d_in = d * ws[l].transpose();
        if (l > 0) d_in = d_in.cwiseProduct(gelu_grad(pre[l - 1]));
        d = std::move(d_in);
    }
    return d;
}

struct AdamState {
    std::vector<Matrix> m, v;
    void init_like(const std::vector<Matrix>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.push_back(Matrix::Zero(p.rows(), p.cols()));
            v.push_back(Matrix::Zero(p.rows(), p.cols()));
        }
    }
    void step(std::vector<Matrix>& params, const std::vector<Matrix>& grads, double lr, int t) {
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grads[i].cwiseProduct(grads[i]);
            params[i] -= lr * (m[i] / c1).cwiseQuotient(((v[i] / c2).cwiseSqrt().array() + eps).matrix());
        }
    }
};

std::vector<Matrix> vectors_as_rows(const std::vector<Vector>& vs) {
    std::vector<Matrix> out;
    out.reserve(vs.size());
    for (const auto& v : vs) out.push_back(v.transpose());
    return out;
}

void rows_back_to_vectors(const std::vector<Matrix>& rows, std::vector<Vector>& vs) {
    for (std::size_t i = 0; i < vs.size(); ++i) vs[i] = rows[i].row(0).transpose();
}

}  // namespace

RqVaeModel init_rqvae(int input_dim, const QuantConfig& config, Rng& rng) {
    RqVaeModel model;
    model.input_dim = input_dim;
    model.latent_dim = config.vae.latent_dim;
    model.beta = config.vae.beta;
    const int h = config.vae.hidden;
    model.params.enc_w = {xavier(input_dim, h, rng), xavier(h, h, rng),
                          xavier(h, config.vae.latent_dim, rng)};
    model.params.enc_b = {Vector::Zero(h), Vector::Zero(h), Vector::Zero(config.vae.latent_dim)};
    model.params.dec_w = {xavier(config.vae.latent_dim, h, rng), xavier(h, h, rng),
                          xavier(h, input_dim, rng)};
    model.params.dec_b = {Vector::Zero(h), Vector::Zero(h), Vector::Zero(input_dim)};
    for (int l = 0; l < config.levels; ++l) {
        model.codebooks.push_back(0.01 * xavier(config.codebook_size, config.vae.latent_dim, rng));
    }
    return model;
}

Matrix vae_encode(const RqVaeModel& model, const Matrix& x) {
    std::vector<Matrix> pre, act;
    return mlp_forward(model.params.enc_w, model.params.enc_b, x, pre, act);
}

Matrix vae_decode_latent(const RqVaeModel& model, const Matrix& zq) {
    std::vector<Matrix> pre, act;
    return mlp_forward(model.params.dec_w, model.params.dec_b, zq, pre, act);
}

RqVaeForwardState rqvae_forward(const RqVaeModel& model, const Matrix& batch) {
    RqVaeForwardState s;
    const Eigen::Index n = batch.rows();
    s.z = mlp_forward(model.params.enc_w, model.params.enc_b, batch, s.enc_pre, s.enc_act);

    Matrix r = s.z;
    s.zq = Matrix::Zero(n, model.latent_dim);
    double quant_err = 0.0;
    for (const Matrix& cb : model.codebooks) {
        s.residual_in.push_back(r);
        std::vector<int> level_codes(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) {
            int best = 0;
            double best_d = (r.row(i) - cb.row(0)).squaredNorm();
            for (Eigen::Index k = 1; k < cb.rows(); ++k) {
                const double d = (r.row(i) - cb.row(k)).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<int>(k);
                }
            }
            level_codes[static_cast<std::size_t>(i)] = best;
            s.zq.row(i) += cb.row(best);
            r.row(i) -= cb.row(best);
            quant_err += best_d;
        }
        s.codes.push_back(std::move(level_codes));
    }

    s.xhat = mlp_forward(model.params.dec_w, model.params.dec_b, s.zq, s.dec_pre, s.dec_act);
    s.recon = (batch - s.xhat).squaredNorm() / static_cast<double>(n);
    s.codebook_loss = quant_err / static_cast<double>(n);
    s.commitment = s.codebook_loss;
    s.total = s.recon + s.codebook_loss + model.beta * s.commitment;
    return s;
}

RqVaeGrads rqvae_backward(const RqVaeModel& model, const Matrix& batch,
                          const RqVaeForwardState& fwd) {
    RqVaeGrads g;
    const double n = static_cast<double>(batch.rows());

    const Matrix d_xhat = (2.0 / n) * (fwd.xhat - batch);
    std::vector<Matrix> dec_gw;
    std::vector<Vector> dec_gb;
    Matrix d_zq = mlp_backward(model.params.dec_w, fwd.zq, fwd.dec_pre, fwd.dec_act, d_xhat,
                               dec_gw, dec_gb);

    // Straight-through: the reconstruction gradient at zq is handed to the
    // encoder output unchanged. Commitment adds 2*beta*(r_in - e) per level.
    Matrix d_z = d_zq;
    g.codebooks.assign(model.codebooks.size(), Matrix());
    for (std::size_t l = 0; l < model.codebooks.size(); ++l) {
        const Matrix& cb = model.codebooks[l];
        Matrix cb_grad = Matrix::Zero(cb.rows(), cb.cols());
        for (Eigen::Index i = 0; i < batch.rows(); ++i) {
            const int k = fwd.codes[l][static_cast<std::size_t>(i)];
            const RowVector diff = fwd.residual_in[l].row(i) - cb.row(k);
            cb_grad.row(k) += (2.0 / n) * (-diff);
            d_z.row(i) += (2.0 * model.beta / n) * diff;
        }
        g.codebooks[l] = std::move(cb_grad);
    }

    std::vector<Matrix> enc_gw;
    std::vector<Vector> enc_gb;
    mlp_backward(model.params.enc_w, batch, fwd.enc_pre, fwd.enc_act, d_z, enc_gw, enc_gb);

    g.params.enc_w = std::move(enc_gw);
    g.params.enc_b = std::move(enc_gb);
    g.params.dec_w = std::move(dec_gw);
    g.params.dec_b = std::move(dec_gb);
    return g;
}

TrainedQuantizer train_rq_vae(const EmbeddingTable& table, const QuantConfig& config) {
    const Matrix data = table.to_matrix();
    const Eigen::Index n = data.rows();
    const std::uint64_t base_seed =
        Rng::splitmix64(config.seed ^ fnv1a(table.modality) ^ 0x7AEULL);
    Rng rng(base_seed);

    RqVaeModel model = init_rqvae(table.dim, config, rng);
    const int batch_size = std::min<int>(config.vae.batch_size, static_cast<int>(n));

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::size_t cursor = 0;
    auto next_batch = [&]() {
        Matrix batch(batch_size, data.cols());
        for (int i = 0; i < batch_size; ++i) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.row(i) = data.row(order[cursor++]);
        }
        return batch;
    };

    // Codebooks start from k-means on the first batch's residuals.
    {
        Matrix first = next_batch();
        Matrix r = vae_encode(model, first);
        for (std::size_t l = 0; l < model.codebooks.size(); ++l) {
            KmeansResult km = kmeans(r, config.codebook_size, 10, rng);
            for (Eigen::Index i = 0; i < r.rows(); ++i) {
                r.row(i) -= km.centroids.row(km.assignment[static_cast<std::size_t>(i)]);
            }
            model.codebooks[l] = std::move(km.centroids);
        }
    }

    // One flat parameter list so a single Adam state covers everything.
    AdamState adam;
    std::vector<Matrix> flat;
    auto gather = [&](RqVaeModel& mdl) {
        std::vector<Matrix*> ptrs;
        for (auto& w : mdl.params.enc_w) ptrs.push_back(&w);
        for (auto& w : mdl.params.dec_w) ptrs.push_back(&w);
        for (auto& cb : mdl.codebooks) ptrs.push_back(&cb);
        return ptrs;
    };
    auto param_ptrs = gather(model);
    flat.reserve(param_ptrs.size());
    for (auto* p : param_ptrs) flat.push_back(*p);
    adam.init_like(flat);
    AdamState adam_bias;
    std::vector<Matrix> flat_bias = vectors_as_rows(model.params.enc_b);
    for (const auto& b : vectors_as_rows(model.params.dec_b)) flat_bias.push_back(b);
    adam_bias.init_like(flat_bias);

    std::vector<std::vector<int>> dead_counter(
        model.codebooks.size(), std::vector<int>(static_cast<std::size_t>(config.codebook_size), 0));

    TrainedQuantizer out;
    out.train_loss.reserve(static_cast<std::size_t>(config.vae.steps));
    for (int step = 1; step <= config.vae.steps; ++step) {
        const Matrix batch = next_batch();
        RqVaeForwardState fwd = rqvae_forward(model, batch);
        if (!std::isfinite(fwd.total)) {
            throw Error("rq-vae: non-finite loss at step " + std::to_string(step) +
                        " (recon=" + std::to_string(fwd.recon) + ")");
        }
        out.train_loss.push_back(fwd.total);
        RqVaeGrads grads = rqvae_backward(model, batch, fwd);

        std::vector<Matrix> flat_grads;
        for (auto& gw : grads.params.enc_w) flat_grads.push_back(std::move(gw));
        for (auto& gw : grads.params.dec_w) flat_grads.push_back(std::move(gw));
        for (auto& gc : grads.codebooks) flat_grads.push_back(std::move(gc));
        for (std::size_t i = 0; i < param_ptrs.size(); ++i) flat[i] = *param_ptrs[i];
        adam.step(flat, flat_grads, config.vae.lr, step);
        for (std::size_t i = 0; i < param_ptrs.size(); ++i) *param_ptrs[i] = flat[i];

        std::vector<Matrix> bias_grads = vectors_as_rows(grads.params.enc_b);
        for (const auto& b : vectors_as_rows(grads.params.dec_b)) bias_grads.push_back(b);
        flat_bias = vectors_as_rows(model.params.enc_b);
        for (const auto& b : vectors_as_rows(model.params.dec_b)) flat_bias.push_back(b);
        adam_bias.step(flat_bias, bias_grads, config.vae.lr, step);
        std::vector<Matrix> enc_rows(flat_bias.begin(),
                                     flat_bias.begin() + static_cast<long>(model.params.enc_b.size()));
        std::vector<Matrix> dec_rows(flat_bias.begin() + static_cast<long>(model.params.enc_b.size()),
                                     flat_bias.end());
        rows_back_to_vectors(enc_rows, model.params.enc_b);
        rows_back_to_vectors(dec_rows, model.params.dec_b);

        // Dead codewords: unused for too long are reseeded to a random
        // residual from the current batch.
        for (std::size_t l = 0; l < model.codebooks.size(); ++l) {
            std::vector<bool> used(static_cast<std::size_t>(config.codebook_size), false);
            for (int c : fwd.codes[l]) used[static_cast<std::size_t>(c)] = true;
            for (int k = 0; k < config.codebook_size; ++k) {
                if (used[static_cast<std::size_t>(k)]) {
                    dead_counter[l][static_cast<std::size_t>(k)] = 0;
                } else if (++dead_counter[l][static_cast<std::size_t>(k)] >= config.vae.dead_steps) {
                    const Eigen::Index row =
                        static_cast<Eigen::Index>(rng.uniform_index(batch.rows()));
                    model.codebooks[l].row(k) = fwd.residual_in[l].row(row);
                    dead_counter[l][static_cast<std::size_t>(k)] = 0;
                }
            }
        }
    }

    out.modality = table.modality;
    out.backend = QuantBackend::kRqVae;
    out.levels = config.levels;
    out.codebook_size = config.codebook_size;
    out.input_dim = table.dim;
    out.code_dim = config.vae.latent_dim;
    out.codebooks = std::move(model.codebooks);
    out.vae = std::move(model.params);
    out.vae_beta = config.vae.beta;
    return out;
}

}  // namespace mgrec
