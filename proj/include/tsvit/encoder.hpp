#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsvit/baseline_layer.hpp"
#include "tsvit/dynamic_layer.hpp"
#include "tsvit/tensor.hpp"
#include "tsvit/windowing.hpp"

namespace tsvit {

enum class EncoderMode { dense, baseline, dynamic };

const char* to_string(EncoderMode mode);

// Architecture hyperparameters plus the selection-mode settings.
struct EncoderConfig {
    EncoderMode mode = EncoderMode::dense;
    int64_t layers = 4;
    int64_t dim = 64;
    int64_t heads = 4;
    int64_t window = 4;    // f
    int64_t patch = 8;     // k
    int64_t hidden_tc = 8; // d_h
    int64_t image_h = 64;
    int64_t image_w = 128;
    int64_t views = 2;
    std::vector<double> baseline_ratios{1.0};
    double rate = 0.5;   // target activation rate r
    double theta = 0.5;
    double gumbel_temperature = 1.0;
    bool double_residual = false;
    double eps = 1e-6;
    uint64_t seed = 1;

    // Presets: "desk", "samb" (SAM-B-like), "eva02l" (EVA-02-L-like).
    static EncoderConfig preset(const std::string& name);

    void validate() const;
    int64_t tokens_h() const { return image_h / patch; }
    int64_t tokens_w() const { return image_w / patch; }
    int64_t tokens() const { return tokens_h() * tokens_w(); }  // N per view
    int64_t proj_hidden() const;  // d_o
    WindowGrid grid() const;

    std::string digest_string() const;
    uint64_t digest() const;
};

struct EncoderWeights {
    Tensor patch_w;  // [d x 3 k^2]
    Tensor patch_b;  // [d]
    std::vector<DynamicLayerWeights> layers;  // selector/tc left empty outside dynamic mode
    ScorerWeights scorer;                     // populated in baseline mode only
};

EncoderWeights init_encoder_weights(const EncoderConfig& cfg);

// Visits every materialized weight tensor as (name, tensor). Order follows
// the structure; checkpointing sorts by name.
void visit_weights(EncoderWeights& w, const std::function<void(const std::string&, Tensor&)>& fn);
void visit_weights(const EncoderWeights& w, const std::function<void(const std::string&, const Tensor&)>& fn);

bool is_trainable_param(const std::string& name);

// Non-overlapping k x k patches linearly projected to d channels.
Tensor patch_embed(const Tensor& image, const EncoderConfig& cfg, const EncoderWeights& w);

struct EncoderForwardResult {
    Tensor z;                          // [d x N]
    std::vector<TokenMask> masks;      // per layer (dynamic mode)
    std::vector<int64_t> activated;    // per layer activated token count at the projection
};

// Sequential application of the configured layer stack to one view.
// `router_mode` selects the dynamic pathway; dense/baseline ignore it.
EncoderForwardResult encoder_forward(const Tensor& image, const EncoderConfig& cfg, const EncoderWeights& w,
                                     RouterMode router_mode, uint64_t noise_seed,
                                     std::vector<DynamicLayerCache>* caches = nullptr);

struct EncoderLayerGradients {
    std::vector<DynamicLayerGrads> layers;
};

// Backward through the dynamic fine-tuning stack. d_z_extra, when present,
// holds one [1 x N] gate-gradient row per layer.
EncoderLayerGradients encoder_backward(const EncoderConfig& cfg, const EncoderWeights& w,
                                       const std::vector<DynamicLayerCache>& caches, const Tensor& d_z_out,
                                       const std::vector<Tensor>* d_z_extra, bool frozen_grads);

// PEFT boundary. Entries are enumerated symbolically from the config, so
// this stays cheap even for large presets.
struct ParamInfo {
    std::string name;
    std::vector<int64_t> shape;
    int64_t count = 0;
    bool trainable = false;
};

struct ParamPartition {
    std::vector<ParamInfo> entries;

    int64_t trainable_count() const;
    int64_t frozen_count() const;
    int64_t total_count() const;
};

// Enumerates all weights for any mode (trainable flags only meaningful in
// dynamic mode).
ParamPartition enumerate_params(const EncoderConfig& cfg);

// Trainable/frozen split of the dynamic mode; throws PartitionError for
// other modes.
ParamPartition peft_partition(const EncoderConfig& cfg);

// Strips the selection and compensation blocks, restoring the frozen dense
// encoder bit-for-bit.
EncoderWeights plug_and_play_restore(const EncoderWeights& w);
EncoderConfig restore_config(const EncoderConfig& cfg);

// Flat binary weight container: magic "TSVIT1", format version, config
// digest, then named float64 arrays in sorted-name order.
void save_checkpoint(const std::string& path, const EncoderConfig& cfg, const EncoderWeights& w);

struct CheckpointData {
    uint64_t config_digest = 0;
    std::vector<std::pair<std::string, Tensor>> arrays;  // sorted by name
};

CheckpointData read_checkpoint(const std::string& path);
void load_checkpoint(const std::string& path, const EncoderConfig& cfg, EncoderWeights& w);

}  // namespace tsvit
