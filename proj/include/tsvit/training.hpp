#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tsvit/encoder.hpp"

namespace tsvit {

// Seeded smooth random field stand-ins for camera images: a sum of
// low-frequency sinusoids plus mild noise, 3 x H x W.
Tensor synthetic_image(const EncoderConfig& cfg, uint64_t seed);
std::vector<Tensor> synthetic_pool(const EncoderConfig& cfg, uint64_t seed, int64_t count);

struct FinetuneOptions {
    int64_t steps = 500;
    double lr = 0.15;
    double momentum = 0.9;
    double lambda_rate = 2.0;     // weight of the activation-rate loss
    double warmup_frac = 0.1;     // linear lambda warmup over the first steps
    uint64_t seed = 1;
    int64_t pool_samples = 4;     // multi-view samples in the synthetic pool
};

struct TrainStepLog {
    int64_t step = 0;
    double loss = 0.0;
    double distill = 0.0;
    double rate_term = 0.0;
    double lambda = 0.0;
    std::vector<double> layer_mean_act;    // noise-free sigmoid(S) mean per layer
    std::vector<int64_t> layer_hard_count; // tokens with sigmoid(S) > theta per layer
};

struct FinetuneLog {
    std::vector<TrainStepLog> rows;
    bool aborted = false;
    std::string abort_reason;
};

// Distillation fine-tuning of the selector and compensator blocks against
// the frozen dense teacher: L = ||z_s - z_t||^2 / (d N) + lambda *
// sum_l (mean(Z_l) - r)^2, plain gradient descent with momentum on the
// trainable parameters only.
FinetuneLog peft_finetune(const EncoderConfig& cfg, EncoderWeights& weights, const std::vector<Tensor>& pool,
                          const FinetuneOptions& opts);

struct ActivationStats {
    std::vector<double> soft_mean;  // mean sigmoid(S) per layer over the eval set
    std::vector<double> hard_rate;  // mean K-bar / N per layer
    std::vector<double> kbar_mean;  // mean K-bar per layer
    double overall_soft_mean = 0.0;
    double overall_hard_rate = 0.0;
};

// Inference-mode activation statistics over an evaluation set.
ActivationStats measure_activation(const EncoderConfig& cfg, const EncoderWeights& weights,
                                   const std::vector<Tensor>& images);

// SHA-256 (hex) over the named weight tensors, sorted by name;
// `trainable_only`/`frozen_only` restrict to one side of the PEFT boundary.
std::string weights_digest(const EncoderWeights& w, bool trainable_only, bool frozen_only);

// Serialized training log; stable formatting so identical runs produce
// identical bytes.
void write_training_log_csv(const std::string& path, const EncoderConfig& cfg, const FinetuneLog& log);

}  // namespace tsvit
