#include "detseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "detseg/detpost.hpp"
#include "detseg/evalmetrics.hpp"
#include "detseg/loss_ops.hpp"
#include "detseg/ops.hpp"
#include "detseg/rng.hpp"

namespace detseg::train {

namespace fs = std::filesystem;
using data::TaskTag;
using nlohmann::json;

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "single_det") return TrainMode::SINGLE_DET;
  if (s == "single_seg") return TrainMode::SINGLE_SEG;
  if (s == "mt_epoch") return TrainMode::MT_EPOCH;
  if (s == "mt_iteration") return TrainMode::MT_ITERATION;
  if (s == "mt_full") return TrainMode::MT_FULL;
  if (s == "finetune_head") return TrainMode::FINETUNE_HEAD;
  if (s == "finetune_full") return TrainMode::FINETUNE_FULL;
  throw std::invalid_argument("unknown training mode '" + s + "'");
}

const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::SINGLE_DET: return "single_det";
    case TrainMode::SINGLE_SEG: return "single_seg";
    case TrainMode::MT_EPOCH: return "mt_epoch";
    case TrainMode::MT_ITERATION: return "mt_iteration";
    case TrainMode::MT_FULL: return "mt_full";
    case TrainMode::FINETUNE_HEAD: return "finetune_head";
    case TrainMode::FINETUNE_FULL: return "finetune_full";
  }
  throw std::logic_error("bad TrainMode");
}

namespace {

constexpr uint64_t kScheduleStream = 0x5c4ed01e;
constexpr uint64_t kAugStream = 0xa46f11b;

int round_up(int v, int m) { return (v + m - 1) / m * m; }

std::vector<data::Box> boxes_for(const data::Sample& s, bool flip) {
  std::vector<data::Box> out = s.boxes;
  if (flip)
    for (auto& b : out) {
      const float x1 = s.width - b.x2, x2 = s.width - b.x1;
      b.x1 = x1;
      b.x2 = x2;
    }
  return out;
}

// Copies the [M,K] block of batch element n out of an [N,M,K] tensor.
Tensor slab(const Tensor& t, int n) {
  const int m = t.shape[1], k = t.shape[2];
  Tensor out({m, k});
  std::memcpy(out.data.data(), t.data.data() + static_cast<int64_t>(n) * m * k,
              static_cast<size_t>(m) * k * sizeof(float));
  return out;
}

double combined_metric(const EvalResult& e) {
  return (e.map >= 0 ? e.map : 0.0) + (e.miou >= 0 ? e.miou : 0.0);
}

json eval_json(const EvalResult& e) {
  json j;
  j["map"] = e.map >= 0 ? json(e.map) : json();
  j["ap50"] = e.ap50 >= 0 ? json(e.ap50) : json();
  j["miou"] = e.miou >= 0 ? json(e.miou) : json();
  return j;
}

constexpr char kStateMagic[8] = {'D', 'S', 'E', 'G', 'T', 'R', 'N', '1'};

}  // namespace

// One mini-batch resolved against the dataset, with per-sample flip decisions
// fixed up front so detection and segmentation targets built from the same
// gather always agree.
struct Trainer::Raw {
  std::vector<const data::Sample*> samples;
  std::vector<char> flip;
  int hp = 0, wp = 0;  // spatial size after padding to the stride multiple

  Tensor images() const {
    const int b = static_cast<int>(samples.size());
    Tensor t({b, 3, hp, wp});
    for (int n = 0; n < b; ++n) {
      const data::Sample& s = *samples[n];
      const bool fl = flip[n];
      for (int c = 0; c < 3; ++c) {
        float* dst = t.data.data() + (static_cast<int64_t>(n) * 3 + c) * hp * wp;
        for (int y = 0; y < s.height; ++y)
          for (int x = 0; x < s.width; ++x)
            dst[static_cast<int64_t>(y) * wp + x] =
                s.image.at(y, fl ? s.width - 1 - x : x, c) / 255.f;
      }
    }
    return t;
  }
};

struct Trainer::DetBatch {
  Tensor images;
  std::vector<int32_t> labels;  // batch * anchors entries
  Tensor tdeltas;               // [B,M,4]
  int num_pos = 0;
};

struct Trainer::SegBatch {
  Tensor images;
  IntTensor target;  // [B,Hp,Wp], 255 in padding
};

Trainer::Raw Trainer::gather(const data::Dataset& data, const std::vector<std::string>& ids,
                             Rng& aug, bool need_mask) const {
  Raw raw;
  for (const auto& id : ids) {
    const data::Sample* s = data.find(id);
    if (!s) throw std::runtime_error("training id '" + id + "' is not in the dataset");
    if (need_mask && !s->has_mask)
      throw std::runtime_error("sample '" + id + "' has no mask annotation");
    raw.samples.push_back(s);
    raw.flip.push_back(cfg_.hflip && aug.uniform() < 0.5 ? 1 : 0);
    raw.hp = std::max(raw.hp, s->height);
    raw.wp = std::max(raw.wp, s->width);
  }
  const int ms = m_.config().enc.strides.back();
  raw.hp = round_up(raw.hp, ms);
  raw.wp = round_up(raw.wp, ms);
  return raw;
}

Trainer::Trainer(model::Model& m, const TrainConfig& cfg) : m_(m), cfg_(cfg) {
  if (cfg_.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (cfg_.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (cfg_.lr < 0) throw std::invalid_argument("lr must be non-negative");
}

const std::vector<det::Anchor>& Trainer::anchors_for(int hp, int wp) {
  auto key = std::make_pair(hp, wp);
  auto it = anchor_cache_.find(key);
  if (it != anchor_cache_.end()) return it->second;
  std::vector<std::pair<int, std::pair<int, int>>> shapes;
  for (int s : m_.config().enc.strides) shapes.push_back({s, {hp / s, wp / s}});
  return anchor_cache_.emplace(key, det::generate_anchors(shapes, m_.config().det))
      .first->second;
}

Var Trainer::det_loss(const std::vector<Var>& levels, const DetBatch& b, double* value) {
  const auto& dc = m_.config().det;
  model::DetOut out = m_.det_forward(levels);
  Var cls = ops::focal_loss(out.cls, b.labels, dc.focal_alpha, dc.focal_gamma, b.num_pos);
  Var reg =
      ops::balanced_l1_loss(out.reg, b.labels, b.tdeltas, dc.bl1_alpha, dc.bl1_gamma, b.num_pos);
  Var total =
      ops::add_scalars({ops::scale(cls, cfg_.det_cls_weight), ops::scale(reg, cfg_.det_loc_weight)});
  if (value) *value = total.val().data[0];
  return total;
}

Var Trainer::seg_loss(const std::vector<Var>& levels, const SegBatch& b, double* value) {
  const auto& sc = m_.config().seg;
  Var logits = m_.seg_forward(levels, b.images.shape[2], b.images.shape[3]);
  Var total = ops::scale(ops::softmax_ce_loss(logits, b.target, sc.ignore_label), cfg_.seg_weight);
  if (value) *value = total.val().data[0];
  return total;
}

Var Trainer::kd_wrap(const std::vector<Var>& levels, const Tensor& images, TaskTag tag,
                     double* acc, int* count) {
  if (!kd_) return {};
  Var term = kd_->kd_term(levels, images, tag);
  if (!term.defined()) return {};
  *acc += term.val().data[0];
  ++*count;
  return term;
}

void Trainer::step(float lr) {
  // Only parameters actually reached by this step's backward passes take
  // part; everything else keeps its bytes, velocity included.
  std::vector<std::pair<const std::string*, Node*>> live;
  double sq = 0.0;
  for (const auto& [name, node] : m_.params().items()) {
    if (!node->requires_grad || node->grad.data.empty()) continue;
    for (float g : node->grad.data) sq += static_cast<double>(g) * g;
    live.push_back({&name, node.get()});
  }
  float gscale = 1.f;
  if (cfg_.clip_norm > 0) {
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) gscale = static_cast<float>(cfg_.clip_norm / norm);
  }
  for (auto& [pname, node] : live) {
    Tensor& v = velocity_[*pname];
    if (v.data.empty()) v = Tensor::zeros(node->value.shape);
    float* p = node->value.data.data();
    const float* g = node->grad.data.data();
    for (size_t i = 0; i < node->value.data.size(); ++i) {
      const float d = g[i] * gscale + cfg_.weight_decay * p[i];
      v.data[i] = cfg_.momentum * v.data[i] + d;
      p[i] -= lr * v.data[i];
    }
  }
}

void Trainer::save_state(const std::string& dir, int next_epoch, double best_metric) const {
  json table = json::array();
  std::vector<const Tensor*> payload;
  for (const auto& [name, node] : m_.params().items()) {
    auto it = velocity_.find(name);
    if (it == velocity_.end()) continue;
    table.push_back({{"name", name}, {"shape", it->second.shape}});
    payload.push_back(&it->second);
  }
  json doc;
  doc["next_epoch"] = next_epoch;
  doc["best_metric"] = best_metric;
  doc["tensors"] = std::move(table);
  const std::string htext = doc.dump();

  const std::string path = dir + "/last.train";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(kStateMagic, 8);
  const uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(hlen));
  for (const Tensor* t : payload)
    out.write(reinterpret_cast<const char*>(t->data.data()),
              static_cast<std::streamsize>(t->data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("optimizer state write failed: " + path);
}

int Trainer::load_state(const std::string& dir, double* best_metric) {
  const std::string path = dir + "/last.train";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("resume requested but " + path + " is missing");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kStateMagic, 8) != 0)
    throw std::runtime_error("not an optimizer state file: " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated optimizer state: " + path);
  json doc = json::parse(htext);

  velocity_.clear();
  for (const auto& e : doc.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    Tensor t(e.at("shape").get<std::vector<int>>());
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    velocity_[name] = std::move(t);
  }
  if (!in) throw std::runtime_error("truncated optimizer state: " + path);
  *best_metric = doc.at("best_metric").get<double>();
  return doc.at("next_epoch").get<int>();
}

TrainResult Trainer::run(const data::Dataset& data, const data::PartialSplit& split,
                         const data::Dataset* val, const std::string& run_dir) {
  const auto& mc = m_.config();
  bool needs_det = true, needs_seg = true;
  switch (cfg_.mode) {
    case TrainMode::SINGLE_DET: needs_seg = false; break;
    case TrainMode::SINGLE_SEG: needs_det = false; break;
    case TrainMode::FINETUNE_HEAD:
    case TrainMode::FINETUNE_FULL:
      (cfg_.finetune_task == TaskTag::DET ? needs_seg : needs_det) = false;
      break;
    default: break;
  }
  if (needs_det && !mc.with_det)
    throw std::runtime_error("training mode needs a detection head but the model has none");
  if (needs_seg && !mc.with_seg)
    throw std::runtime_error("training mode needs a segmentation head but the model has none");

  std::string ckpt_dir;
  std::ofstream metrics;
  int start_epoch = 0;
  double best = std::numeric_limits<double>::lowest();
  if (!run_dir.empty()) {
    ckpt_dir = run_dir + "/checkpoints";
    fs::create_directories(ckpt_dir);
    if (cfg_.resume && fs::exists(ckpt_dir + "/last.ckpt")) {
      model::load_checkpoint(m_, ckpt_dir + "/last.ckpt");
      start_epoch = load_state(ckpt_dir, &best);
    }
    metrics.open(run_dir + "/metrics.jsonl",
                 start_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + run_dir + "/metrics.jsonl");
  } else if (cfg_.resume) {
    throw std::runtime_error("resume needs a run directory");
  }

  TrainResult res;

  for (int epoch = start_epoch; epoch < cfg_.epochs; ++epoch) {
    const float lr_e =
        cfg_.cosine
            ? cfg_.lr * 0.5f *
                  (1.f + std::cos(std::numbers::pi_v<float> * epoch / cfg_.epochs))
            : cfg_.lr;
    const uint64_t sched_seed =
        mix_seed(mix_seed(cfg_.seed, kScheduleStream), static_cast<uint64_t>(epoch));
    Rng aug(mix_seed(mix_seed(cfg_.seed, kAugStream), static_cast<uint64_t>(epoch)));

    double det_acc = 0, seg_acc = 0, kd_acc = 0;
    int det_n = 0, seg_n = 0, kd_n = 0;

    const auto run_det_batch = [&](const std::vector<std::string>& ids, bool own_step) {
      Raw raw = gather(data, ids, aug, false);
      DetBatch b = make_det_batch(raw);
      Var x(b.images);
      auto levels = m_.encode(x);
      double v = 0;
      Var loss = det_loss(levels, b, &v);
      det_acc += v, ++det_n;
      Var kd = kd_wrap(levels, b.images, TaskTag::DET, &kd_acc, &kd_n);
      if (kd.defined()) loss = ops::add_scalars({loss, kd});
      backward(loss);
      if (own_step) step(lr_e);
    };
    const auto run_seg_batch = [&](const std::vector<std::string>& ids, bool own_step) {
      Raw raw = gather(data, ids, aug, true);
      SegBatch b = make_seg_batch(raw);
      Var x(b.images);
      auto levels = m_.encode(x);
      double v = 0;
      Var loss = seg_loss(levels, b, &v);
      seg_acc += v, ++seg_n;
      Var kd = kd_wrap(levels, b.images, TaskTag::SEG, &kd_acc, &kd_n);
      if (kd.defined()) loss = ops::add_scalars({loss, kd});
      backward(loss);
      if (own_step) step(lr_e);
    };

    switch (cfg_.mode) {
      case TrainMode::SINGLE_DET:
      case TrainMode::SINGLE_SEG:
      case TrainMode::FINETUNE_HEAD:
      case TrainMode::FINETUNE_FULL: {
        const TaskTag task = cfg_.mode == TrainMode::SINGLE_DET ? TaskTag::DET
                             : cfg_.mode == TrainMode::SINGLE_SEG
                                 ? TaskTag::SEG
                                 : cfg_.finetune_task;
        const auto& pool = task == TaskTag::DET ? split.det_ids : split.seg_ids;
        if (pool.empty()) throw std::runtime_error("training subset is empty");
        std::vector<std::string> order = pool;
        Rng shuf(sched_seed);
        shuf.shuffle(order);
        for (size_t i = 0; i < order.size(); i += cfg_.batch_size) {
          const size_t end = std::min(order.size(), i + cfg_.batch_size);
          std::vector<std::string> ids(order.begin() + i, order.begin() + end);
          m_.params().zero_grad();
          if (task == TaskTag::DET)
            run_det_batch(ids, true);
          else
            run_seg_batch(ids, true);
        }
        break;
      }
      case TrainMode::MT_EPOCH: {
        auto sched = data::make_epoch_schedule(split, cfg_.batch_size, data::ScheduleMode::EPOCH,
                                               sched_seed, epoch);
        const TaskTag tag = sched.batches.front().tag;
        for (const auto& b : sched.batches) {
          if (b.tag != tag) break;  // one task per epoch; the trailing block waits its turn
          m_.params().zero_grad();
          if (tag == TaskTag::DET)
            run_det_batch(b.ids, true);
          else
            run_seg_batch(b.ids, true);
        }
        break;
      }
      case TrainMode::MT_ITERATION: {
        auto sched = data::make_epoch_schedule(split, cfg_.batch_size,
                                               data::ScheduleMode::ITERATION, sched_seed, epoch);
        for (size_t i = 0; i + 1 < sched.batches.size(); i += 2) {
          m_.params().zero_grad();
          for (size_t k = i; k < i + 2; ++k) {
            const auto& b = sched.batches[k];
            if (b.tag == TaskTag::DET)
              run_det_batch(b.ids, false);
            else
              run_seg_batch(b.ids, false);
          }
          step(lr_e);
        }
        break;
      }
      case TrainMode::MT_FULL: {
        std::set<std::string> pool(split.det_ids.begin(), split.det_ids.end());
        pool.insert(split.seg_ids.begin(), split.seg_ids.end());
        std::vector<std::string> order(pool.begin(), pool.end());
        if (order.empty()) throw std::runtime_error("training subset is empty");
        Rng shuf(sched_seed);
        shuf.shuffle(order);
        for (size_t i = 0; i < order.size(); i += cfg_.batch_size) {
          const size_t end = std::min(order.size(), i + cfg_.batch_size);
          std::vector<std::string> ids(order.begin() + i, order.begin() + end);
          m_.params().zero_grad();
          Raw raw = gather(data, ids, aug, true);
          DetBatch db = make_det_batch(raw);
          SegBatch sb = make_seg_batch(raw);
          Var x(db.images);
          auto levels = m_.encode(x);
          double dv = 0, sv = 0;
          Var ld = det_loss(levels, db, &dv);
          Var ls = seg_loss(levels, sb, &sv);
          det_acc += dv, ++det_n;
          seg_acc += sv, ++seg_n;
          backward(ops::add_scalars({ld, ls}));
          step(lr_e);
        }
        break;
      }
    }

    EpochStats st;
    st.epoch = epoch;
    st.lr = lr_e;
    if (det_n) st.det_loss = det_acc / det_n;
    if (seg_n) st.seg_loss = seg_acc / seg_n;
    if (kd_n) st.kd_loss = kd_acc / kd_n;

    const bool last_epoch = epoch == cfg_.epochs - 1;
    const bool do_eval =
        val && (last_epoch || (cfg_.eval_every > 0 && (epoch + 1) % cfg_.eval_every == 0));
    if (do_eval) {
      st.eval = evaluate_model(m_, *val);
      res.final_eval = st.eval;
    }

    if (metrics.is_open()) {
      json line;
      line["epoch"] = epoch;
      line["lr"] = lr_e;
      line["det_loss"] = st.det_loss >= 0 ? json(st.det_loss) : json();
      line["seg_loss"] = st.seg_loss >= 0 ? json(st.seg_loss) : json();
      line["kd_loss"] = st.kd_loss >= 0 ? json(st.kd_loss) : json();
      const json ev = eval_json(st.eval);
      for (const auto& key : {"map", "ap50", "miou"}) line[key] = ev.at(key);
      metrics << line.dump() << "\n";
      metrics.flush();
    }

    if (!ckpt_dir.empty()) {
      model::save_checkpoint(m_, ckpt_dir + "/last.ckpt");
      res.last_checkpoint = ckpt_dir + "/last.ckpt";
      if (cfg_.save_epoch_checkpoints) {
        char name[32];
        std::snprintf(name, sizeof(name), "/epoch_%03d.ckpt", epoch);
        model::save_checkpoint(m_, ckpt_dir + name);
      }
      if (do_eval && combined_metric(st.eval) > best) {
        best = combined_metric(st.eval);
        model::save_checkpoint(m_, ckpt_dir + "/best.ckpt");
        res.best_checkpoint = ckpt_dir + "/best.ckpt";
      }
      save_state(ckpt_dir, epoch + 1, best);
    }
    res.history.push_back(st);
    if (cfg_.stop_after_epochs > 0 && epoch + 1 >= cfg_.stop_after_epochs) break;
  }
  return res;
}

Trainer::DetBatch Trainer::make_det_batch(const Raw& raw) {
  const auto& dc = m_.config().det;
  const auto& anchors = anchors_for(raw.hp, raw.wp);
  const int b = static_cast<int>(raw.samples.size());
  const int m = static_cast<int>(anchors.size());

  DetBatch out;
  out.images = raw.images();
  out.labels.assign(static_cast<size_t>(b) * m, -1);
  out.tdeltas = Tensor({b, m, 4});
  for (int n = 0; n < b; ++n) {
    const auto boxes = boxes_for(*raw.samples[n], raw.flip[n]);
    det::DetTargets t = det::match_anchors(anchors, boxes, dc);
    std::copy(t.labels.begin(), t.labels.end(), out.labels.begin() + static_cast<size_t>(n) * m);
    std::memcpy(out.tdeltas.data.data() + static_cast<int64_t>(n) * m * 4, t.deltas.data.data(),
                static_cast<size_t>(m) * 4 * sizeof(float));
    out.num_pos += t.num_pos;
  }
  return out;
}

Trainer::SegBatch Trainer::make_seg_batch(const Raw& raw) const {
  const int b = static_cast<int>(raw.samples.size());
  SegBatch out;
  out.images = raw.images();
  out.target = IntTensor({b, raw.hp, raw.wp}, 255);
  for (int n = 0; n < b; ++n) {
    const data::Sample& s = *raw.samples[n];
    int32_t* dst = out.target.data.data() + static_cast<int64_t>(n) * raw.hp * raw.wp;
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x)
        dst[static_cast<int64_t>(y) * raw.wp + x] =
            s.mask.at(y, raw.flip[n] ? s.width - 1 - x : x);
  }
  return out;
}

TrainResult train_single(model::Model& m, const data::Dataset& data,
                         const std::vector<std::string>& subset, TaskTag task, TrainConfig cfg,
                         const data::Dataset* val, const std::string& run_dir) {
  cfg.mode = task == TaskTag::DET ? TrainMode::SINGLE_DET : TrainMode::SINGLE_SEG;
  data::PartialSplit sp;
  sp.seed = cfg.seed;
  (task == TaskTag::DET ? sp.det_ids : sp.seg_ids) = subset;
  Trainer t(m, cfg);
  return t.run(data, sp, val, run_dir);
}

TrainResult finetune(model::Model& m, const data::Dataset& data,
                     const std::vector<std::string>& subset, TrainConfig cfg,
                     const data::Dataset* val, const std::string& run_dir) {
  if (cfg.mode != TrainMode::FINETUNE_HEAD && cfg.mode != TrainMode::FINETUNE_FULL)
    throw std::invalid_argument("finetune expects a finetune_* training mode");
  if (cfg.init_checkpoint.empty())
    throw std::invalid_argument("finetune needs init_checkpoint");
  model::load_checkpoint_prefixes(m, cfg.init_checkpoint, {"backbone/", "neck/"});
  if (cfg.mode == TrainMode::FINETUNE_HEAD) m.freeze({"backbone", "neck"});
  data::PartialSplit sp;
  sp.seed = cfg.seed;
  (cfg.finetune_task == TaskTag::DET ? sp.det_ids : sp.seg_ids) = subset;
  Trainer t(m, cfg);
  return t.run(data, sp, val, run_dir);
}

TrainResult train_multitask(model::Model& m, const data::Dataset& data,
                            const data::PartialSplit& split, TrainConfig cfg,
                            const data::Dataset* val, const std::string& run_dir, KdHook* kd) {
  Trainer t(m, cfg);
  if (kd) t.set_kd_hook(kd);
  return t.run(data, split, val, run_dir);
}

EvalArtifacts evaluate_model_full(model::Model& m, const data::Dataset& val) {
  NoGradGuard ng;
  const auto& mc = m.config();
  const int max_stride = mc.enc.strides.back();

  EvalArtifacts art;
  std::vector<img::ImageU8> pred_masks;
  std::vector<const data::Sample*> mask_samples;
  std::map<std::pair<int, int>, std::vector<det::Anchor>> anchors;

  for (const auto& s : val.samples) {
    const int hp = round_up(s.height, max_stride), wp = round_up(s.width, max_stride);
    Tensor img({1, 3, hp, wp});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
          img.data[(static_cast<int64_t>(c) * hp + y) * wp + x] = s.image.at(y, x, c) / 255.f;
    Var x(std::move(img));
    auto levels = m.encode(x);

    if (mc.with_det) {
      model::DetOut o = m.det_forward(levels);
      auto key = std::make_pair(hp, wp);
      if (!anchors.count(key)) anchors[key] = det::generate_anchors(o.level_shapes, mc.det);
      const Tensor cls0 = slab(o.cls.val(), 0);
      const Tensor reg0 = slab(o.reg.val(), 0);
      for (const auto& d :
           det::decode_detections(cls0, reg0, anchors[key], mc.det, s.width, s.height))
        art.preds.push_back({s.id, d.x1, d.y1, d.x2, d.y2, d.cls, d.score});
      for (const auto& b : s.boxes) art.gts.push_back({s.id, b.x1, b.y1, b.x2, b.y2, b.cls});
    }
    if (mc.with_seg && s.has_mask) {
      Var logits = m.seg_forward(levels, hp, wp);
      img::ImageU8 full = eval::predict_mask(logits.val(), 0);
      img::ImageU8 crop = img::make_image(s.width, s.height, 1);
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) crop.at(y, x) = full.at(y, x);
      pred_masks.push_back(std::move(crop));
      mask_samples.push_back(&s);
    }
  }

  if (mc.with_det) {
    art.has_det = true;
    art.ap = eval::compute_map(art.preds, art.gts);
    art.summary.map = art.ap.map;
    art.summary.ap50 = art.ap.ap50;
  }
  if (mc.with_seg && !pred_masks.empty()) {
    std::vector<const img::ImageU8*> pm, gm;
    for (size_t i = 0; i < pred_masks.size(); ++i) {
      pm.push_back(&pred_masks[i]);
      gm.push_back(&mask_samples[i]->mask);
    }
    art.has_iou = true;
    art.iou = eval::compute_miou(pm, gm, mc.seg.num_classes, mc.seg.ignore_label);
    art.summary.miou = art.iou.miou;
  }
  return art;
}

EvalResult evaluate_model(model::Model& m, const data::Dataset& val) {
  return evaluate_model_full(m, val).summary;
}

EvalResult evaluate_checkpoint(const std::string& checkpoint, const data::Dataset& val) {
  model::Model m(model::read_checkpoint_config(checkpoint), 0);
  // By-name loading: distilled checkpoints carry projection tensors a freshly
  // built model does not have.
  model::load_checkpoint_prefixes(m, checkpoint, {""});
  return evaluate_model(m, val);
}

}  // namespace detseg::train
