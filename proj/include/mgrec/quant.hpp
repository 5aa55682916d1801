// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mgrec/formats.hpp"
#include "mgrec/rng.hpp"
#include "mgrec/types.hpp"

namespace mgrec {

enum class QuantBackend { kRqKmeans, kRqVae };

std::string to_string(QuantBackend backend);
QuantBackend quant_backend_from_string(const std::string& name);

struct VaeConfig {
    int latent_dim = 16;
    int hidden = 64;
    double beta = 0.25;  // commitment weight
    double lr = 1e-3;
    int steps = 2000;
    int batch_size = 64;
    int dead_steps = 50;  // reinit codewords unused for this many steps
};

struct QuantConfig {
    int levels = 3;
    int codebook_size = 256;
    QuantBackend backend = QuantBackend::kRqKmeans;
    int kmeans_iters = 25;
    VaeConfig vae;
    std::uint64_t seed = 7;

    void validate() const;
};

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

/// k-means++ seeding: first centroid uniform, the rest sampled with
/// probability proportional to squared distance from the chosen set.
Matrix kmeans_pp_init(const Matrix& points, int k, Rng& rng);

struct KmeansResult {
    Matrix centroids;             // k x dim
    std::vector<int> assignment;  // per point, ties to the smallest index
    double distortion = 0.0;      // mean squared distance to assigned centroid
    std::vector<double> distortion_per_iter;
};

/// Lloyd iterations from k-means++ seeds. Empty clusters are reseeded to the
/// point currently farthest from its centroid, which keeps the distortion
/// sequence nonincreasing. Fewer distinct points than k is tolerated (warns).
KmeansResult kmeans(const Matrix& points, int k, int iters, Rng& rng);
KmeansResult kmeans(const Matrix& points, int k, int iters, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Quantizers
// ---------------------------------------------------------------------------

/// Encoder/decoder MLP parameters for the rq-vae backend.
struct VaeParams {
    std::vector<Matrix> enc_w;
    std::vector<Vector> enc_b;
    std::vector<Matrix> dec_w;
    std::vector<Vector> dec_b;
};

struct TrainedQuantizer {
    std::string modality;
    QuantBackend backend = QuantBackend::kRqKmeans;
    int levels = 0;
    int codebook_size = 0;
    int input_dim = 0;
    int code_dim = 0;                // == input_dim for rq-kmeans, latent for rq-vae
    std::vector<Matrix> codebooks;   // levels matrices of codebook_size x code_dim
    VaeParams vae;                   // rq-vae only
    double vae_beta = 0.25;
    std::vector<double> level_mse;   // rq-kmeans: per-level training residual
    std::vector<double> train_loss;  // rq-vae: per-step loss log
};

TrainedQuantizer train_quantizer(const EmbeddingTable& table, const QuantConfig& config);

/// Greedy residual assignment: at each level pick the codeword minimizing the
/// squared residual norm, ties to the smallest index.
std::vector<int> encode(const TrainedQuantizer& q, const Vector& x);

/// Sum of the selected codewords; for rq-vae the decoder is applied on top.
/// Shorter code lists sum the given levels only; empty codes give zeros.
Vector decode(const TrainedQuantizer& q, const std::vector<int>& codes);

/// Encodes every item; colliding tuples get suffixes 0,1,2,... in ascending
/// item-id order so that (codes, suffix) is unique within the modality.
SemanticIdMap assign_ids(const TrainedQuantizer& q, const EmbeddingTable& table);

// Checkpoint round trip (kind "quantizer").
void save_quantizer(const TrainedQuantizer& q, const std::string& path);
TrainedQuantizer load_quantizer(const std::string& path);

// ---------------------------------------------------------------------------
// rq-vae internals (exposed for training and gradient verification)
// ---------------------------------------------------------------------------

struct RqVaeModel {
    VaeParams params;
    std::vector<Matrix> codebooks;
    int input_dim = 0;
    int latent_dim = 0;
    double beta = 0.25;
};

struct RqVaeForwardState {
    Matrix z;                          // batch x latent (encoder output)
    Matrix zq;                         // batch x latent (summed codewords)
    std::vector<std::vector<int>> codes;  // per level, per row
    std::vector<Matrix> residual_in;   // per level: residual entering that level
    Matrix xhat;
    double recon = 0.0;
    double codebook_loss = 0.0;   // sum_l ||sg[r] - e||^2, batch mean
    double commitment = 0.0;      // same value, gradient routed to the encoder
    double total = 0.0;
    // encoder/decoder activation caches
    std::vector<Matrix> enc_pre, enc_act;
    std::vector<Matrix> dec_pre, dec_act;
};

struct RqVaeGrads {
    VaeParams params;  // same shapes as the model parameters
    std::vector<Matrix> codebooks;
};

/// Quantization is piecewise constant; gradients follow the usual convention:
/// reconstruction reaches the encoder through the straight-through identity,
/// codebooks learn from the codebook loss only, and the commitment term pulls
/// the encoder toward the (frozen) selected codewords.
RqVaeForwardState rqvae_forward(const RqVaeModel& model, const Matrix& batch);
RqVaeGrads rqvae_backward(const RqVaeModel& model, const Matrix& batch,
                          const RqVaeForwardState& fwd);

Matrix vae_encode(const RqVaeModel& model, const Matrix& x);
Matrix vae_decode_latent(const RqVaeModel& model, const Matrix& zq);

RqVaeModel init_rqvae(int input_dim, const QuantConfig& config, Rng& rng);

TrainedQuantizer train_rq_vae(const EmbeddingTable& table, const QuantConfig& config);

}  // namespace mgrec
