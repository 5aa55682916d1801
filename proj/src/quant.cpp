// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include "mgrec/quant.hpp"

#include <cmath>
#include <iostream>

#include "mgrec/nn.hpp"

namespace mgrec {

std::string to_string(QuantBackend backend) {
    return backend == QuantBackend::kRqKmeans ? "rq-kmeans" : "rq-vae";
}

QuantBackend quant_backend_from_string(const std::string& name) {
    if (name == "rq-kmeans") return QuantBackend::kRqKmeans;
    if (name == "rq-vae") return QuantBackend::kRqVae;
    throw ConfigError("unknown quantizer backend '" + name + "'");
}

void QuantConfig::validate() const {
    if (levels < 1) throw ConfigError("quant: levels must be >= 1");
    if (codebook_size < 2) throw ConfigError("quant: codebook_size must be >= 2");
    if (kmeans_iters < 1) throw ConfigError("quant: kmeans_iters must be >= 1");
    if (vae.latent_dim < 1 || vae.hidden < 1 || vae.batch_size < 1 || vae.steps < 0) {
        throw ConfigError("quant: invalid rq-vae hyperparameters");
    }
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

Matrix kmeans_pp_init(const Matrix& points, int k, Rng& rng) {
    const Eigen::Index n = points.rows();
    if (n == 0) throw Error("kmeans: no points");
    Matrix centroids(k, points.cols());
    centroids.row(0) = points.row(static_cast<Eigen::Index>(rng.uniform_index(n)));
    Vector d2 = (points.rowwise() - centroids.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
        const double total = d2.sum();
        Eigen::Index pick;
        if (total <= 0.0) {
            pick = static_cast<Eigen::Index>(rng.uniform_index(n));
        } else {
            const double r = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > r) {
                    pick = i;
                    break;
                }
            }
        }
        centroids.row(c) = points.row(pick);
        d2 = d2.cwiseMin((points.rowwise() - centroids.row(c)).rowwise().squaredNorm());
    }
    return centroids;
}

KmeansResult kmeans(const Matrix& points, int k, int iters, Rng& rng) {
    const Eigen::Index n = points.rows();
    if (k < 1) throw ConfigError("kmeans: k must be >= 1");
    if (n < k) {
        std::cerr << "[mgrec] warning: kmeans got " << n << " points for k=" << k
                  << "; duplicate centroids will be reseeded where possible\n";
    }

    KmeansResult res;
    res.centroids = kmeans_pp_init(points, k, rng);
    res.assignment.assign(static_cast<std::size_t>(n), -1);

    std::vector<int> prev_assignment;
    Vector min_d2(n);
    for (int iter = 0; iter < iters; ++iter) {
        // Assignment step.
        Matrix d = pairwise_sq_dist(points, res.centroids);
        for (Eigen::Index i = 0; i < n; ++i) {
            const int a = argmin_row(d, i);
            res.assignment[static_cast<std::size_t>(i)] = a;
            min_d2[i] = d(i, a);
        }
        res.distortion = min_d2.mean();
        res.distortion_per_iter.push_back(res.distortion);
        if (res.assignment == prev_assignment) break;
        prev_assignment = res.assignment;

        // Update step.
        Matrix sums = Matrix::Zero(k, points.cols());
        std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(res.assignment[static_cast<std::size_t>(i)]) += points.row(i);
            ++counts[static_cast<std::size_t>(res.assignment[static_cast<std::size_t>(i)])];
        }
        Vector reseed_d2 = min_d2;
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                res.centroids.row(c) =
                    sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
            } else {
                // Reseed to the point farthest from its centroid.
                Eigen::Index far = 0;
                reseed_d2.maxCoeff(&far);
                res.centroids.row(c) = points.row(far);
                reseed_d2[far] = -1.0;
            }
        }
    }

    // Final assignment against the last centroid update.
    Matrix d = pairwise_sq_dist(points, res.centroids);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int a = argmin_row(d, i);
        res.assignment[static_cast<std::size_t>(i)] = a;
        total += d(i, a);
    }
    res.distortion = total / static_cast<double>(n);
    res.distortion_per_iter.push_back(res.distortion);
    return res;
}

KmeansResult kmeans(const Matrix& points, int k, int iters, std::uint64_t seed) {
    Rng rng(seed);
    return kmeans(points, k, iters, rng);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

TrainedQuantizer train_rq_kmeans(const EmbeddingTable& table, const QuantConfig& config) {
    TrainedQuantizer q;
    q.modality = table.modality;
    q.backend = QuantBackend::kRqKmeans;
    q.levels = config.levels;
    q.codebook_size = config.codebook_size;
    q.input_dim = table.dim;
    q.code_dim = table.dim;

    if (static_cast<int>(table.size()) < config.codebook_size) {
        std::cerr << "[mgrec] warning: codebook size " << config.codebook_size << " exceeds "
                  << table.size() << " items in modality '" << table.modality << "'\n";
    }

    const std::uint64_t base_seed = Rng::splitmix64(config.seed ^ fnv1a(table.modality));
    Matrix residual = table.to_matrix();
    for (int level = 0; level < config.levels; ++level) {
        Rng rng = Rng::derive(base_seed, static_cast<std::uint64_t>(level));
        KmeansResult km = kmeans(residual, config.codebook_size, config.kmeans_iters, rng);
        for (Eigen::Index i = 0; i < residual.rows(); ++i) {
            residual.row(i) -= km.centroids.row(km.assignment[static_cast<std::size_t>(i)]);
        }
        q.codebooks.push_back(std::move(km.centroids));
        q.level_mse.push_back(residual.rowwise().squaredNorm().mean());
    }
    return q;
}

}  // namespace

TrainedQuantizer train_quantizer(const EmbeddingTable& table, const QuantConfig& config) {
    config.validate();
    if (table.rows.empty()) throw Error("train_quantizer: empty embedding table");
    if (config.backend == QuantBackend::kRqKmeans) return train_rq_kmeans(table, config);
    return train_rq_vae(table, config);
}

// ---------------------------------------------------------------------------
// encode / decode / assign
// ---------------------------------------------------------------------------

std::vector<int> encode(const TrainedQuantizer& q, const Vector& x) {
    if (static_cast<int>(x.size()) != q.input_dim) {
        throw Error("encode: vector has dim " + std::to_string(x.size()) + ", quantizer expects " +
                    std::to_string(q.input_dim));
    }
    Vector r;
    if (q.backend == QuantBackend::kRqVae) {
        RqVaeModel model;
        model.params = q.vae;
        model.codebooks = q.codebooks;
        model.input_dim = q.input_dim;
        model.latent_dim = q.code_dim;
        r = vae_encode(model, x.transpose()).row(0).transpose();
    } else {
        r = x;
    }
    std::vector<int> codes;
    codes.reserve(q.codebooks.size());
    for (const Matrix& cb : q.codebooks) {
        int best = 0;
        double best_d = (r - cb.row(0).transpose()).squaredNorm();
        for (Eigen::Index k = 1; k < cb.rows(); ++k) {
            const double d = (r - cb.row(k).transpose()).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(k);
            }
        }
        codes.push_back(best);
        r -= cb.row(best).transpose();
    }
    return codes;
}

Vector decode(const TrainedQuantizer& q, const std::vector<int>& codes) {
    if (codes.size() > q.codebooks.size()) {
        throw Error("decode: " + std::to_string(codes.size()) + " codes for " +
                    std::to_string(q.codebooks.size()) + " levels");
    }
    Vector zq = Vector::Zero(q.code_dim);
    for (std::size_t l = 0; l < codes.size(); ++l) {
        const int c = codes[l];
        if (c < 0 || c >= q.codebooks[l].rows()) {
            throw Error("decode: code " + std::to_string(c) + " out of range at level " +
                        std::to_string(l));
        }
        zq += q.codebooks[l].row(c).transpose();
    }
    if (q.backend == QuantBackend::kRqVae) {
        RqVaeModel model;
        model.params = q.vae;
        model.codebooks = q.codebooks;
        model.input_dim = q.input_dim;
        model.latent_dim = q.code_dim;
        return vae_decode_latent(model, zq.transpose()).row(0).transpose();
    }
    return zq;
}

SemanticIdMap assign_ids(const TrainedQuantizer& q, const EmbeddingTable& table) {
    SemanticIdMap map;
    map.modality = q.modality;
    map.levels = q.levels;
    map.codebook_size = q.codebook_size;
    std::map<std::vector<int>, int> tuple_use;
    for (const auto& [id, vec] : table.rows) {  // ascending item id
        SidEntry entry;
        entry.codes = encode(q, vec.cast<double>());
        entry.suffix = tuple_use[entry.codes]++;
        map.entries.emplace(id, std::move(entry));
    }
    map.rebuild_collision_index();
    map.check_invariants();
    return map;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {
constexpr const char* kQuantizerKind = "quantizer";
}

void save_quantizer(const TrainedQuantizer& q, const std::string& path) {
    io::Writer w;
    w.put_string(q.modality);
    w.put_string(to_string(q.backend));
    w.put_i32(q.levels);
    w.put_i32(q.codebook_size);
    w.put_i32(q.input_dim);
    w.put_i32(q.code_dim);
    w.put_f64(q.vae_beta);
    w.put_u32(static_cast<std::uint32_t>(q.codebooks.size()));
    for (const Matrix& cb : q.codebooks) w.put_matrix(cb);
    auto put_mlp = [&w](const std::vector<Matrix>& ws, const std::vector<Vector>& bs) {
        w.put_u32(static_cast<std::uint32_t>(ws.size()));
        for (std::size_t i = 0; i < ws.size(); ++i) {
            w.put_matrix(ws[i]);
            w.put_vector(bs[i]);
        }
    };
    put_mlp(q.vae.enc_w, q.vae.enc_b);
    put_mlp(q.vae.dec_w, q.vae.dec_b);
    w.put_u32(static_cast<std::uint32_t>(q.level_mse.size()));
    for (double v : q.level_mse) w.put_f64(v);
    w.put_u32(static_cast<std::uint32_t>(q.train_loss.size()));
    for (double v : q.train_loss) w.put_f64(v);
    io::save_checkpoint(path, kQuantizerKind, w.bytes());
}

TrainedQuantizer load_quantizer(const std::string& path) {
    const std::string payload = io::load_checkpoint(path, kQuantizerKind);
    io::Reader r(payload);
    TrainedQuantizer q;
    q.modality = r.get_string();
    q.backend = quant_backend_from_string(r.get_string());
    q.levels = r.get_i32();
    q.codebook_size = r.get_i32();
    q.input_dim = r.get_i32();
    q.code_dim = r.get_i32();
    q.vae_beta = r.get_f64();
    const std::uint32_t n_cb = r.get_u32();
    for (std::uint32_t i = 0; i < n_cb; ++i) q.codebooks.push_back(r.get_matrix());
    auto get_mlp = [&r](std::vector<Matrix>& ws, std::vector<Vector>& bs) {
        const std::uint32_t n = r.get_u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            ws.push_back(r.get_matrix());
            bs.push_back(r.get_vector());
        }
    };
    get_mlp(q.vae.enc_w, q.vae.enc_b);
    get_mlp(q.vae.dec_w, q.vae.dec_b);
    const std::uint32_t n_mse = r.get_u32();
    for (std::uint32_t i = 0; i < n_mse; ++i) q.level_mse.push_back(r.get_f64());
    const std::uint32_t n_loss = r.get_u32();
    for (std::uint32_t i = 0; i < n_loss; ++i) q.train_loss.push_back(r.get_f64());
    return q;
}

}  // namespace mgrec
