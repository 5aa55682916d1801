// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>

#include "mgrec/seqrec.hpp"

namespace mgrec {

void TrainSchedule::validate() const {
    if (align_steps < 0 || rec_steps < 0) throw ConfigError("schedule: steps must be >= 0");
    if (batch_size < 1) throw ConfigError("schedule: batch_size must be >= 1");
    if (lr <= 0.0) throw ConfigError("schedule: lr must be positive");
    if (warmup_steps < 0) throw ConfigError("schedule: warmup_steps must be >= 0");
}

AdamW::AdamW(ParamStore& params, double lr, double weight_decay, int warmup_steps)
    : params_(params), lr_(lr), weight_decay_(weight_decay), warmup_steps_(warmup_steps) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& t = params[static_cast<int>(i)];
        m_.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
        v_.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
    }
}

void AdamW::step() {
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double warm =
        warmup_steps_ > 0 ? std::min(1.0, static_cast<double>(t_) / warmup_steps_) : 1.0;
    const double lr = lr_ * warm;
    const double c1 = 1.0 - std::pow(b1, t_);
    const double c2 = 1.0 - std::pow(b2, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& t = params_[static_cast<int>(i)];
        m_[i] = b1 * m_[i] + (1.0 - b1) * t.grad;
        v_[i] = b2 * v_[i] + (1.0 - b2) * t.grad.cwiseProduct(t.grad);
        const Matrix update =
            (m_[i] / c1).cwiseQuotient(((v_[i] / c2).cwiseSqrt().array() + eps).matrix());
        if (t.decay && weight_decay_ > 0.0) {
            t.value -= lr * (update + weight_decay_ * t.value);
        } else {
            t.value -= lr * update;
        }
    }
}

namespace {

class BatchSampler {
public:
    BatchSampler(std::size_t n, int batch_size, Rng rng)
        : order_(n), batch_size_(batch_size), rng_(rng) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        rng_.shuffle(order_);
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> batch;
        batch.reserve(static_cast<std::size_t>(batch_size_));
        for (int i = 0; i < batch_size_; ++i) {
            if (cursor_ == order_.size()) {
                rng_.shuffle(order_);
                cursor_ = 0;
            }
            batch.push_back(order_[cursor_++]);
        }
        return batch;
    }

private:
    std::vector<std::size_t> order_;
    int batch_size_;
    Rng rng_;
    std::size_t cursor_ = 0;
};

void run_phase(Seq2SeqModel& model, const std::vector<const SequenceExample*>& pool, int steps,
               char phase, const TrainSchedule& schedule, int& global_step, TrainResult& result,
               bool verbose) {
    if (steps <= 0) return;
    if (pool.empty()) {
        throw Error(std::string("train: phase ") + phase + " has no examples");
    }
    const bool is_align = phase == 'A';
    const int batch_size = is_align && schedule.align_batch_size > 0 ? schedule.align_batch_size
                                                                     : schedule.batch_size;
    const double lr = is_align && schedule.align_lr > 0.0 ? schedule.align_lr : schedule.lr;
    AdamW optimizer(model.params(), lr, schedule.weight_decay, schedule.warmup_steps);
    BatchSampler sampler(pool.size(), batch_size,
                         Rng(Rng::splitmix64(schedule.seed ^ (0xBA7C4ULL + phase))));
    Rng dropout_rng(Rng::splitmix64(schedule.seed ^ (0xD20ULL + phase)));

    DivergenceGuard guard;
    for (int step = 1; step <= steps; ++step) {
        const std::vector<std::size_t> idx = sampler.next();
        std::vector<const SequenceExample*> batch;
        batch.reserve(idx.size());
        for (std::size_t i : idx) batch.push_back(pool[i]);

        model.params().zero_grads();
        const double loss = model.forward_loss(batch, /*train=*/true, &dropout_rng);
        if (!std::isfinite(loss)) {
            throw Error("train: non-finite loss at step " + std::to_string(global_step + 1));
        }
        optimizer.step();

        ++global_step;
        result.curve.push_back({global_step, phase, loss});
        if (guard.update(loss)) {
            throw Error("train: diverged (loss " + std::to_string(loss) + " > 10x initial " +
                        std::to_string(guard.initial()) + " for 100 consecutive steps)");
        }
        if (verbose && step % 100 == 0) {
            std::cerr << "[mgrec] phase " << phase << " step " << step << "/" << steps << " loss "
                      << loss << "\n";
        }
    }
}

}  // namespace

TrainResult train(Seq2SeqModel& model, const std::vector<SequenceExample>& align_examples,
                  const std::vector<SequenceExample>& rec_examples, const TrainSchedule& schedule,
                  bool verbose) {
    schedule.validate();
    TrainResult result;
    int global_step = 0;

    std::vector<const SequenceExample*> align_pool, rec_pool;
    for (const auto& ex : align_examples) align_pool.push_back(&ex);
    for (const auto& ex : rec_examples) rec_pool.push_back(&ex);

    if (schedule.mix) {
        std::vector<const SequenceExample*> mixed = align_pool;
        mixed.insert(mixed.end(), rec_pool.begin(), rec_pool.end());
        run_phase(model, mixed, schedule.align_steps + schedule.rec_steps, 'M', schedule,
                  global_step, result, verbose);
        return result;
    }

    run_phase(model, align_pool, schedule.align_steps, 'A', schedule, global_step, result,
              verbose);
    // Phase B restarts from fresh optimizer state on the phase-A parameters.
    run_phase(model, rec_pool, schedule.rec_steps, 'B', schedule, global_step, result, verbose);
    return result;
}

void write_losscurve(const TrainResult& result, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write loss curve: " + path);
    out << "step,phase,loss\n";
    char buf[64];
    for (const LossPoint& p : result.curve) {
        std::snprintf(buf, sizeof(buf), "%.9g", p.loss);
        out << p.step << ',' << p.phase << ',' << buf << '\n';
    }
}

}  // namespace mgrec
