#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "detseg/autograd.hpp"
#include "detseg/tensor.hpp"

namespace detseg::model {

struct BackboneConfig {
  std::vector<int> widths{32, 64, 128, 256};  // stage output channels, strides 4/8/16/32
  std::vector<int> depths{1, 1, 1, 1};        // residual blocks per stage
  int stem_width = 0;                         // 0 means widths[0]
  bool bottleneck = false;                    // 3-conv blocks with 4x expansion
  bool remove_first_maxpool = true;           // downsample by conv stride instead
};

enum class NeckKind { FPN, PAFPN };

struct EncoderConfig {
  BackboneConfig backbone;
  NeckKind neck = NeckKind::FPN;
  std::vector<int> strides{8, 16, 32};  // pyramid levels, strictly increasing powers of two
  int det_channels = 256;
  bool context_enhancement = true;
};

struct DetHeadConfig {
  int conv_blocks = 2;
  int num_classes = 3;
  std::vector<float> anchor_scales{4.0f};          // box size = scale * stride
  std::vector<float> anchor_ratios{0.5f, 1.f, 2.f};  // h/w
  float focal_alpha = 0.25f;
  float focal_gamma = 2.0f;
  float bl1_alpha = 0.5f;
  float bl1_gamma = 1.5f;
  float pos_iou = 0.5f;
  float neg_iou = 0.4f;
  float nms_iou = 0.5f;
  float score_thresh = 0.05f;
  int max_detections = 100;
  float prior_prob = 0.01f;  // classification bias init

  int anchors_per_cell() const {
    return static_cast<int>(anchor_scales.size() * anchor_ratios.size());
  }
};

struct SegHeadConfig {
  int seg_channels = 128;
  int num_classes = 4;  // includes background
  int ignore_label = 255;
};

struct ModelConfig {
  EncoderConfig enc;
  DetHeadConfig det;
  SegHeadConfig seg;
  bool with_det = true;
  bool with_seg = true;
};

// Desk-scale presets plus paper-fidelity ResNet configurations.
EncoderConfig encoder_small();
EncoderConfig encoder_large();
EncoderConfig encoder_rn18();
EncoderConfig encoder_rn50();

struct DetOut {
  Var cls;  // [N, M, K], anchor-major rows concatenated over levels in stride order
  Var reg;  // [N, M, 4]
  std::vector<std::pair<int, std::pair<int, int>>> level_shapes;  // (stride, (H, W))
};

// Builds and initializes all parameters up front under stable names
// (backbone/, neck/, det_head/, seg_head/). Initialization of each tensor is
// seeded from (seed, name), so two models built with the same seed agree
// parameter-by-parameter regardless of which heads are attached.
class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Images [N,3,H,W] with H, W divisible by the max stride.
  std::vector<Var> encode(const Var& images);
  DetOut det_forward(const std::vector<Var>& levels);
  Var seg_forward(const std::vector<Var>& levels, int out_h, int out_w);

  void freeze(const std::vector<std::string>& parts);  // backbone/neck/det_head/seg_head
  int64_t count_parameters() const { return params_.count_scalars(); }

 private:
  ModelConfig cfg_;
  ParamStore params_;
  uint64_t seed_;

  Var param(const std::string& name) const { return params_.get(name); }
  void build();
  void register_conv(const std::string& prefix, int cin, int cout, int k, bool bias,
                     bool with_gn);
  Var conv_gn_relu(const Var& x, const std::string& prefix, int stride, int pad);
};

// Serializes every parameter (and the config snapshot) to a single file.
void save_checkpoint(const Model& m, const std::string& path);

// Restores weights into a freshly built model; throws on architecture or
// name-table mismatch.
void load_checkpoint(Model& m, const std::string& path);

// Loads only parameters under the given name prefixes (e.g. {"backbone/",
// "neck/"} when finetuning a fresh head on a pretrained encoder). Every
// matching parameter must exist in the file with the right shape.
void load_checkpoint_prefixes(Model& m, const std::string& path,
                              const std::vector<std::string>& prefixes);

// Reads just the config snapshot so callers can rebuild the right shape.
ModelConfig read_checkpoint_config(const std::string& path);

std::string to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace detseg::model
