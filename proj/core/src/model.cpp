#include "detseg/model.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

#include "detseg/ops.hpp"
#include "detseg/rng.hpp"

using json = nlohmann::json;

namespace detseg::model {

namespace {

uint64_t name_hash(const std::string& s) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

int gn_groups(int channels) {
  if (channels % 8 == 0) return 8;
  if (channels % 4 == 0) return 4;
  if (channels % 2 == 0) return 2;
  return 1;
}

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

int stage_of_stride(int stride, int num_stages) {
  // Stage k sits at stride 4 * 2^k.
  int k = 0, s = 4;
  while (s < stride) {
    s *= 2;
    ++k;
  }
  if (s != stride || k >= num_stages)
    throw std::invalid_argument("encoder: stride " + std::to_string(stride) +
                                " has no backbone stage");
  return k;
}

}  // namespace

EncoderConfig encoder_small() {
  EncoderConfig e;
  e.backbone.widths = {32, 64, 128, 256};
  e.backbone.depths = {1, 1, 1, 1};
  e.neck = NeckKind::FPN;
  return e;
}

EncoderConfig encoder_large() {
  EncoderConfig e;
  e.backbone.widths = {32, 64, 128, 256};
  e.backbone.depths = {2, 2, 2, 2};
  e.neck = NeckKind::PAFPN;
  return e;
}

EncoderConfig encoder_rn18() {
  EncoderConfig e;
  e.backbone.widths = {64, 128, 256, 512};
  e.backbone.depths = {2, 2, 2, 2};
  e.backbone.remove_first_maxpool = false;
  e.neck = NeckKind::FPN;
  return e;
}

EncoderConfig encoder_rn50() {
  EncoderConfig e;
  e.backbone.widths = {256, 512, 1024, 2048};
  e.backbone.depths = {3, 4, 6, 3};
  e.backbone.stem_width = 64;
  e.backbone.bottleneck = true;
  e.backbone.remove_first_maxpool = false;
  e.neck = NeckKind::PAFPN;
  return e;
}

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) { build(); }

void Model::register_conv(const std::string& prefix, int cin, int cout, int k, bool bias,
                          bool with_gn) {
  Rng rng(mix_seed(seed_, name_hash(prefix)));
  Tensor w({cout, cin, k, k});
  kaiming_normal_(w, cin * k * k, rng);
  params_.create(prefix + "/w", w.shape, w.data);
  if (bias) params_.create(prefix + "/b", {cout});
  if (with_gn) {
    Tensor g({cout}, 1.f);
    params_.create(prefix + "/gn_g", g.shape, g.data);
    params_.create(prefix + "/gn_b", {cout});
  }
}

Var Model::conv_gn_relu(const Var& x, const std::string& prefix, int stride, int pad) {
  Var y = ops::conv2d(x, param(prefix + "/w"), Var(), stride, pad);
  y = ops::group_norm(y, param(prefix + "/gn_g"), param(prefix + "/gn_b"),
                      gn_groups(y.val().shape[1]));
  return ops::relu(y);
}

void Model::build() {
  const auto& bb = cfg_.enc.backbone;
  if (bb.widths.size() != bb.depths.size() || bb.widths.empty())
    throw std::invalid_argument("encoder: widths/depths must be non-empty and equal length");
  if (cfg_.enc.det_channels < 1) throw std::invalid_argument("encoder: det_channels must be > 0");
  for (size_t i = 0; i < cfg_.enc.strides.size(); ++i) {
    const int s = cfg_.enc.strides[i];
    if (!is_pow2(s)) throw std::invalid_argument("encoder: strides must be powers of two");
    if (i > 0 && s != cfg_.enc.strides[i - 1] * 2)
      throw std::invalid_argument("encoder: strides must double level to level");
    stage_of_stride(s, static_cast<int>(bb.widths.size()));
  }

  // Backbone.
  const int stem = bb.stem_width > 0 ? bb.stem_width : bb.widths[0];
  register_conv("backbone/stem", 3, stem, 3, false, true);
  int cin = stem;
  for (size_t st = 0; st < bb.widths.size(); ++st) {
    const int cout = bb.widths[st];
    for (int blk = 0; blk < bb.depths[st]; ++blk) {
      const std::string p =
          "backbone/s" + std::to_string(st + 1) + "/b" + std::to_string(blk);
      const bool down = blk == 0 && (st > 0 || bb.remove_first_maxpool);
      if (bb.bottleneck) {
        const int mid = std::max(8, cout / 4);
        register_conv(p + "/conv1", cin, mid, 1, false, true);
        register_conv(p + "/conv2", mid, mid, 3, false, true);
        register_conv(p + "/conv3", mid, cout, 1, false, true);
      } else {
        register_conv(p + "/conv1", cin, cout, 3, false, true);
        register_conv(p + "/conv2", cout, cout, 3, false, true);
      }
      if (cin != cout || down) register_conv(p + "/down", cin, cout, 1, false, true);
      cin = cout;
    }
  }

  // Neck.
  const int dc = cfg_.enc.det_channels;
  const int top_stage = stage_of_stride(cfg_.enc.strides.back(),
                                        static_cast<int>(bb.widths.size()));
  if (cfg_.enc.context_enhancement)
    register_conv("neck/cem", bb.widths[static_cast<size_t>(top_stage)],
                  bb.widths[static_cast<size_t>(top_stage)], 1, true, false);
  for (int s : cfg_.enc.strides) {
    const int stage = stage_of_stride(s, static_cast<int>(bb.widths.size()));
    register_conv("neck/lat" + std::to_string(s), bb.widths[static_cast<size_t>(stage)], dc, 1,
                  true, false);
    register_conv("neck/out" + std::to_string(s), dc, dc, 3, true, false);
  }
  if (cfg_.enc.neck == NeckKind::PAFPN) {
    for (size_t i = 1; i < cfg_.enc.strides.size(); ++i) {
      const std::string s = std::to_string(cfg_.enc.strides[i]);
      register_conv("neck/pa_down" + s, dc, dc, 3, true, false);
      register_conv("neck/pa_out" + s, dc, dc, 3, true, false);
    }
  }

  // Detection head: two towers sharing structure, not weights.
  if (cfg_.with_det) {
    const int A = cfg_.det.anchors_per_cell();
    const int K = cfg_.det.num_classes;
    if (K < 1) throw std::invalid_argument("det head: num_classes must be >= 1");
    for (int b = 0; b < cfg_.det.conv_blocks; ++b) {
      register_conv("det_head/cls" + std::to_string(b), dc, dc, 3, false, true);
      register_conv("det_head/reg" + std::to_string(b), dc, dc, 3, false, true);
    }
    for (const char* branch : {"cls_pred", "reg_pred"}) {
      const std::string p = std::string("det_head/") + branch;
      const int cout = branch[0] == 'c' ? A * K : A * 4;
      Rng rng(mix_seed(seed_, name_hash(p)));
      Tensor w({cout, dc, 3, 3});
      for (auto& v : w.data) v = static_cast<float>(rng.normal() * 0.01);
      params_.create(p + "/w", w.shape, w.data);
      Tensor bias({cout});
      if (branch[0] == 'c') {
        const float prior = -std::log((1.f - cfg_.det.prior_prob) / cfg_.det.prior_prob);
        bias.fill(prior);
      }
      params_.create(p + "/b", bias.shape, bias.data);
    }
  }

  // Segmentation head: per-level upsampling chains to stride 4, then fuse.
  if (cfg_.with_seg) {
    const int sc = cfg_.seg.seg_channels;
    if (cfg_.seg.num_classes < 2)
      throw std::invalid_argument("seg head: num_classes must be >= 2");
    for (int s : cfg_.enc.strides) {
      int steps = 0;
      for (int v = s; v > 4; v /= 2) ++steps;
      const std::string lp = "seg_head/l" + std::to_string(s);
      if (steps == 0) {
        register_conv(lp + "/c0", dc, sc, 3, false, true);
      } else {
        for (int j = 0; j < steps; ++j)
          register_conv(lp + "/c" + std::to_string(j), j == 0 ? dc : sc, sc, 3, false, true);
      }
    }
    register_conv("seg_head/classifier", sc, cfg_.seg.num_classes, 1, true, false);
  }
}

std::vector<Var> Model::encode(const Var& images) {
  const auto& bb = cfg_.enc.backbone;
  const auto& shape = images.val().shape;
  if (shape.size() != 4 || shape[1] != 3)
    throw std::invalid_argument("encode: images must be [N,3,H,W]");
  const int max_stride = cfg_.enc.strides.back();
  if (shape[2] % max_stride != 0 || shape[3] % max_stride != 0)
    throw std::invalid_argument("encode: H and W must be divisible by the max stride");

  Var x = conv_gn_relu(images, "backbone/stem", 2, 1);
  if (!bb.remove_first_maxpool) x = ops::max_pool2d(x, 3, 2, 1);

  std::vector<Var> stages;
  for (size_t st = 0; st < bb.widths.size(); ++st) {
    const int cout = bb.widths[st];
    for (int blk = 0; blk < bb.depths[st]; ++blk) {
      const std::string p =
          "backbone/s" + std::to_string(st + 1) + "/b" + std::to_string(blk);
      const bool down = blk == 0 && (st > 0 || bb.remove_first_maxpool);
      const int stride = down ? 2 : 1;
      Var main;
      if (bb.bottleneck) {
        main = conv_gn_relu(x, p + "/conv1", 1, 0);
        main = conv_gn_relu(main, p + "/conv2", stride, 1);
        main = ops::conv2d(main, param(p + "/conv3/w"), Var(), 1, 0);
        main = ops::group_norm(main, param(p + "/conv3/gn_g"), param(p + "/conv3/gn_b"),
                               gn_groups(cout));
      } else {
        main = conv_gn_relu(x, p + "/conv1", stride, 1);
        main = ops::conv2d(main, param(p + "/conv2/w"), Var(), 1, 1);
        main = ops::group_norm(main, param(p + "/conv2/gn_g"), param(p + "/conv2/gn_b"),
                               gn_groups(cout));
      }
      Var skip = x;
      if (params_.has(p + "/down/w")) {
        skip = ops::conv2d(x, param(p + "/down/w"), Var(), stride, 0);
        skip = ops::group_norm(skip, param(p + "/down/gn_g"), param(p + "/down/gn_b"),
                               gn_groups(cout));
      }
      x = ops::relu(ops::add(main, skip));
    }
    stages.push_back(x);
  }

  const int num_stages = static_cast<int>(bb.widths.size());
  const int top_stage = stage_of_stride(cfg_.enc.strides.back(), num_stages);
  if (cfg_.enc.context_enhancement) {
    Var& top = stages[static_cast<size_t>(top_stage)];
    Var g = ops::global_avg_pool(top);
    g = ops::conv2d(g, param("neck/cem/w"), param("neck/cem/b"), 1, 0);
    top = ops::add_channel_bias(top, g);
  }

  // Top-down pass.
  std::vector<Var> laterals;
  for (int s : cfg_.enc.strides) {
    const int stage = stage_of_stride(s, num_stages);
    laterals.push_back(ops::conv2d(stages[static_cast<size_t>(stage)],
                                   param("neck/lat" + std::to_string(s) + "/w"),
                                   param("neck/lat" + std::to_string(s) + "/b"), 1, 0));
  }
  for (int i = static_cast<int>(laterals.size()) - 2; i >= 0; --i)
    laterals[static_cast<size_t>(i)] = ops::add(
        laterals[static_cast<size_t>(i)], ops::upsample_nearest2x(laterals[static_cast<size_t>(i + 1)]));

  std::vector<Var> outs;
  for (size_t i = 0; i < laterals.size(); ++i) {
    const std::string s = std::to_string(cfg_.enc.strides[i]);
    outs.push_back(ops::conv2d(laterals[i], param("neck/out" + s + "/w"),
                               param("neck/out" + s + "/b"), 1, 1));
  }

  if (cfg_.enc.neck == NeckKind::PAFPN) {
    // One bottom-up augmentation pass over the FPN outputs.
    for (size_t i = 1; i < outs.size(); ++i) {
      const std::string s = std::to_string(cfg_.enc.strides[i]);
      Var down = ops::conv2d(outs[i - 1], param("neck/pa_down" + s + "/w"),
                             param("neck/pa_down" + s + "/b"), 2, 1);
      outs[i] = ops::conv2d(ops::add(down, outs[i]), param("neck/pa_out" + s + "/w"),
                            param("neck/pa_out" + s + "/b"), 1, 1);
    }
  }
  return outs;
}

DetOut Model::det_forward(const std::vector<Var>& levels) {
  if (!cfg_.with_det) throw std::logic_error("det_forward: model built without det head");
  const int A = cfg_.det.anchors_per_cell();
  const int K = cfg_.det.num_classes;
  std::vector<Var> cls_rows, reg_rows;
  DetOut out;
  for (size_t i = 0; i < levels.size(); ++i) {
    Var c = levels[i], r = levels[i];
    for (int b = 0; b < cfg_.det.conv_blocks; ++b) {
      c = conv_gn_relu(c, "det_head/cls" + std::to_string(b), 1, 1);
      r = conv_gn_relu(r, "det_head/reg" + std::to_string(b), 1, 1);
    }
    c = ops::conv2d(c, param("det_head/cls_pred/w"), param("det_head/cls_pred/b"), 1, 1);
    r = ops::conv2d(r, param("det_head/reg_pred/w"), param("det_head/reg_pred/b"), 1, 1);
    out.level_shapes.push_back(
        {cfg_.enc.strides[i], {c.val().shape[2], c.val().shape[3]}});
    cls_rows.push_back(ops::to_anchor_major(c, A, K));
    reg_rows.push_back(ops::to_anchor_major(r, A, 4));
  }
  out.cls = ops::concat_rows(cls_rows);
  out.reg = ops::concat_rows(reg_rows);
  return out;
}

Var Model::seg_forward(const std::vector<Var>& levels, int out_h, int out_w) {
  if (!cfg_.with_seg) throw std::logic_error("seg_forward: model built without seg head");
  Var fused;
  for (size_t i = 0; i < levels.size(); ++i) {
    const int s = cfg_.enc.strides[i];
    const std::string lp = "seg_head/l" + std::to_string(s);
    Var x = levels[i];
    int steps = 0;
    for (int v = s; v > 4; v /= 2) ++steps;
    if (steps == 0) {
      x = conv_gn_relu(x, lp + "/c0", 1, 1);
    } else {
      for (int j = 0; j < steps; ++j) {
        x = conv_gn_relu(x, lp + "/c" + std::to_string(j), 1, 1);
        x = ops::upsample_bilinear(x, 2);
      }
    }
    fused = fused.defined() ? ops::add(fused, x) : x;
  }
  Var logits =
      ops::conv2d(fused, param("seg_head/classifier/w"), param("seg_head/classifier/b"), 1, 0);
  logits = ops::upsample_bilinear(logits, 4);
  if (logits.val().shape[2] != out_h || logits.val().shape[3] != out_w)
    logits = ops::crop_spatial(logits, out_h, out_w);
  return logits;
}

void Model::freeze(const std::vector<std::string>& parts) {
  for (const auto& p : parts) {
    if (p != "backbone" && p != "neck" && p != "det_head" && p != "seg_head")
      throw std::invalid_argument("freeze: unknown part '" + p + "'");
    params_.set_trainable(p + "/", false);
  }
}

std::string to_json(const ModelConfig& cfg) {
  json j;
  j["encoder"]["widths"] = cfg.enc.backbone.widths;
  j["encoder"]["depths"] = cfg.enc.backbone.depths;
  j["encoder"]["stem_width"] = cfg.enc.backbone.stem_width;
  j["encoder"]["bottleneck"] = cfg.enc.backbone.bottleneck;
  j["encoder"]["remove_first_maxpool"] = cfg.enc.backbone.remove_first_maxpool;
  j["encoder"]["neck"] = cfg.enc.neck == NeckKind::PAFPN ? "PAFPN" : "FPN";
  j["encoder"]["strides"] = cfg.enc.strides;
  j["encoder"]["det_channels"] = cfg.enc.det_channels;
  j["encoder"]["context_enhancement"] = cfg.enc.context_enhancement;
  j["det"]["enabled"] = cfg.with_det;
  j["det"]["conv_blocks"] = cfg.det.conv_blocks;
  j["det"]["num_classes"] = cfg.det.num_classes;
  j["det"]["anchor_scales"] = cfg.det.anchor_scales;
  j["det"]["anchor_ratios"] = cfg.det.anchor_ratios;
  j["det"]["focal_alpha"] = cfg.det.focal_alpha;
  j["det"]["focal_gamma"] = cfg.det.focal_gamma;
  j["det"]["bl1_alpha"] = cfg.det.bl1_alpha;
  j["det"]["bl1_gamma"] = cfg.det.bl1_gamma;
  j["det"]["pos_iou"] = cfg.det.pos_iou;
  j["det"]["neg_iou"] = cfg.det.neg_iou;
  j["det"]["nms_iou"] = cfg.det.nms_iou;
  j["det"]["score_thresh"] = cfg.det.score_thresh;
  j["det"]["max_detections"] = cfg.det.max_detections;
  j["det"]["prior_prob"] = cfg.det.prior_prob;
  j["seg"]["enabled"] = cfg.with_seg;
  j["seg"]["seg_channels"] = cfg.seg.seg_channels;
  j["seg"]["num_classes"] = cfg.seg.num_classes;
  j["seg"]["ignore_label"] = cfg.seg.ignore_label;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig cfg;
  const auto& e = j.at("encoder");
  cfg.enc.backbone.widths = e.at("widths").get<std::vector<int>>();
  cfg.enc.backbone.depths = e.at("depths").get<std::vector<int>>();
  cfg.enc.backbone.stem_width = e.at("stem_width").get<int>();
  cfg.enc.backbone.bottleneck = e.at("bottleneck").get<bool>();
  cfg.enc.backbone.remove_first_maxpool = e.at("remove_first_maxpool").get<bool>();
  cfg.enc.neck = e.at("neck").get<std::string>() == "PAFPN" ? NeckKind::PAFPN : NeckKind::FPN;
  cfg.enc.strides = e.at("strides").get<std::vector<int>>();
  cfg.enc.det_channels = e.at("det_channels").get<int>();
  cfg.enc.context_enhancement = e.at("context_enhancement").get<bool>();
  const auto& d = j.at("det");
  cfg.with_det = d.at("enabled").get<bool>();
  cfg.det.conv_blocks = d.at("conv_blocks").get<int>();
  cfg.det.num_classes = d.at("num_classes").get<int>();
  cfg.det.anchor_scales = d.at("anchor_scales").get<std::vector<float>>();
  cfg.det.anchor_ratios = d.at("anchor_ratios").get<std::vector<float>>();
  cfg.det.focal_alpha = d.at("focal_alpha").get<float>();
  cfg.det.focal_gamma = d.at("focal_gamma").get<float>();
  cfg.det.bl1_alpha = d.at("bl1_alpha").get<float>();
  cfg.det.bl1_gamma = d.at("bl1_gamma").get<float>();
  cfg.det.pos_iou = d.at("pos_iou").get<float>();
  cfg.det.neg_iou = d.at("neg_iou").get<float>();
  cfg.det.nms_iou = d.at("nms_iou").get<float>();
  cfg.det.score_thresh = d.at("score_thresh").get<float>();
  cfg.det.max_detections = d.at("max_detections").get<int>();
  cfg.det.prior_prob = d.at("prior_prob").get<float>();
  const auto& s = j.at("seg");
  cfg.with_seg = s.at("enabled").get<bool>();
  cfg.seg.seg_channels = s.at("seg_channels").get<int>();
  cfg.seg.num_classes = s.at("num_classes").get<int>();
  cfg.seg.ignore_label = s.at("ignore_label").get<int>();
  return cfg;
}

}  // namespace detseg::model
