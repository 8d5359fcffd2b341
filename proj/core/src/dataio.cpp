#include "detseg/dataio.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "detseg/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace detseg::data {

const char* task_name(TaskTag t) { return t == TaskTag::DET ? "det" : "seg"; }

const Sample* Dataset::find(const std::string& id) const {
  const int i = index_of(id);
  return i < 0 ? nullptr : &samples[static_cast<size_t>(i)];
}

int Dataset::index_of(const std::string& id) const {
  auto it = std::lower_bound(samples.begin(), samples.end(), id,
                             [](const Sample& s, const std::string& v) { return s.id < v; });
  if (it == samples.end() || it->id != id) return -1;
  return static_cast<int>(it - samples.begin());
}

PartialSplit split_partial(const IdList& pool, uint64_t seed, const SplitOptions& opt) {
  if (pool.ids.empty()) throw std::invalid_argument("split_partial: empty dataset");
  if (pool.has_mask.size() != pool.ids.size())
    throw std::invalid_argument("split_partial: has_mask does not match id count");

  std::vector<std::string> maskless, masked;
  for (size_t i = 0; i < pool.ids.size(); ++i)
    (pool.has_mask[i] ? masked : maskless).push_back(pool.ids[i]);
  std::sort(maskless.begin(), maskless.end());
  std::sort(masked.begin(), masked.end());

  const int n = static_cast<int>(pool.ids.size());
  int seg_target;
  if (opt.seg_count >= 0) {
    seg_target = opt.seg_count;
  } else {
    const int det_target = static_cast<int>(std::llround(opt.det_fraction * n));
    seg_target = n - det_target;
  }
  if (seg_target > static_cast<int>(masked.size()))
    throw std::runtime_error("split_partial: requested seg size " + std::to_string(seg_target) +
                             " but only " + std::to_string(masked.size()) +
                             " samples carry masks");

  Rng rng(mix_seed(seed, 0x51a7));
  rng.shuffle(masked);

  PartialSplit out;
  out.seed = seed;
  out.seg_ids.assign(masked.begin(), masked.begin() + seg_target);
  out.det_ids = maskless;
  out.det_ids.insert(out.det_ids.end(), masked.begin() + seg_target, masked.end());
  std::sort(out.det_ids.begin(), out.det_ids.end());
  std::sort(out.seg_ids.begin(), out.seg_ids.end());
  return out;
}

PartialSplit split_partial(const Dataset& ds, uint64_t seed, const SplitOptions& opt) {
  IdList pool;
  for (const auto& s : ds.samples) {
    pool.ids.push_back(s.id);
    pool.has_mask.push_back(s.has_mask ? 1 : 0);
  }
  return split_partial(pool, seed, opt);
}

PartialSplit halve_subset(const PartialSplit& split, TaskTag which, uint64_t seed) {
  const std::vector<std::string>& src = which == TaskTag::DET ? split.det_ids : split.seg_ids;
  if (src.empty()) throw std::invalid_argument("halve_subset: chosen subset is empty");

  std::vector<std::string> ids = src;
  Rng rng(mix_seed(seed, 0x4a1f));
  rng.shuffle(ids);
  ids.erase(ids.begin(), ids.begin() + static_cast<long>(ids.size() / 2));
  std::sort(ids.begin(), ids.end());

  PartialSplit out = split;
  (which == TaskTag::DET ? out.det_ids : out.seg_ids) = std::move(ids);
  return out;
}

namespace {

// Shuffled copy, then whole reshuffled passes until `want` ids are available.
std::vector<std::string> padded_order(const std::vector<std::string>& ids, size_t want, Rng& rng) {
  std::vector<std::string> order = ids;
  rng.shuffle(order);
  while (order.size() < want) {
    std::vector<std::string> pass = ids;
    rng.shuffle(pass);
    const size_t take = std::min(pass.size(), want - order.size());
    order.insert(order.end(), pass.begin(), pass.begin() + static_cast<long>(take));
  }
  return order;
}

std::vector<std::vector<std::string>> chunk(const std::vector<std::string>& order, int batch) {
  std::vector<std::vector<std::string>> out;
  for (size_t i = 0; i < order.size(); i += static_cast<size_t>(batch)) {
    const size_t end = std::min(order.size(), i + static_cast<size_t>(batch));
    out.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(end));
  }
  return out;
}

}  // namespace

EpochSchedule make_epoch_schedule(const PartialSplit& split, int batch_size, ScheduleMode mode,
                                  uint64_t seed, int epoch) {
  if (batch_size < 1) throw std::invalid_argument("make_epoch_schedule: batch_size must be >= 1");
  if (split.det_ids.empty() || split.seg_ids.empty())
    throw std::invalid_argument("make_epoch_schedule: both subsets must be non-empty");

  const auto nb = [batch_size](size_t n) {
    return (n + static_cast<size_t>(batch_size) - 1) / static_cast<size_t>(batch_size);
  };
  const size_t n_batches = std::max(nb(split.det_ids.size()), nb(split.seg_ids.size()));

  Rng rng(mix_seed(seed, 0x5c4e));
  const auto order_for = [&](const std::vector<std::string>& ids) {
    const size_t want = nb(ids.size()) < n_batches
                            ? n_batches * static_cast<size_t>(batch_size)
                            : ids.size();
    return padded_order(ids, want, rng);
  };
  auto det_batches = chunk(order_for(split.det_ids), batch_size);
  auto seg_batches = chunk(order_for(split.seg_ids), batch_size);

  EpochSchedule sched;
  sched.mode = mode;
  const bool det_first = (mode == ScheduleMode::ITERATION) || (epoch % 2 == 0);
  auto& first = det_first ? det_batches : seg_batches;
  auto& second = det_first ? seg_batches : det_batches;
  const TaskTag first_tag = det_first ? TaskTag::DET : TaskTag::SEG;
  const TaskTag second_tag = det_first ? TaskTag::SEG : TaskTag::DET;

  if (mode == ScheduleMode::ITERATION) {
    for (size_t i = 0; i < n_batches; ++i) {
      sched.batches.push_back({first_tag, std::move(first[i])});
      sched.batches.push_back({second_tag, std::move(second[i])});
    }
  } else {
    for (auto& b : first) sched.batches.push_back({first_tag, std::move(b)});
    for (auto& b : second) sched.batches.push_back({second_tag, std::move(b)});
  }
  return sched;
}

ClassMap voc_group_map() {
  ClassMap m;
  m.group_names = {"vehicle", "animal", "furniture", "person"};
  for (int id : {1, 2, 4, 6, 7, 14, 19}) m.mapping[id] = 1;
  for (int id : {3, 8, 10, 12, 13, 17}) m.mapping[id] = 2;
  for (int id : {5, 9, 11, 16, 18, 20}) m.mapping[id] = 3;
  m.mapping[15] = 4;
  return m;
}

Dataset remap_classes(const Dataset& ds, const ClassMap& map) {
  Dataset out = ds;
  int max_group = 0;
  for (const auto& [src, dst] : map.mapping) max_group = std::max(max_group, dst);
  for (auto& s : out.samples) {
    if (!s.has_mask) continue;
    for (auto& px : s.mask.pixels) {
      if (px == 0 || px == 255) continue;
      auto it = map.mapping.find(static_cast<int>(px));
      if (it == map.mapping.end())
        throw std::runtime_error("remap_classes: unmapped class id " + std::to_string(px));
      px = static_cast<uint8_t>(it->second);
    }
  }
  out.num_seg_classes = max_group + 1;
  return out;
}

namespace {

[[noreturn]] void bad_record(const std::string& path, const std::string& detail) {
  throw std::runtime_error("malformed annotation file " + path + ": " + detail);
}

void validate_sample(const Sample& s, const std::string& path) {
  if (s.width < 1 || s.height < 1) bad_record(path, "non-positive dimensions for id " + s.id);
  for (const auto& b : s.boxes) {
    if (!(b.x1 >= 0 && b.x1 < b.x2 && b.x2 <= static_cast<float>(s.width) && b.y1 >= 0 &&
          b.y1 < b.y2 && b.y2 <= static_cast<float>(s.height)))
      bad_record(path, "invalid box for id " + s.id);
    if (b.cls < 1) bad_record(path, "box class must be >= 1 for id " + s.id);
  }
}

}  // namespace

Dataset load_dataset(const std::string& root) {
  const std::string ann_path = (fs::path(root) / "annotations.json").string();
  std::ifstream in(ann_path);
  if (!in) throw std::runtime_error("cannot open " + ann_path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    bad_record(ann_path, e.what());
  }
  if (!doc.is_array()) bad_record(ann_path, "top level must be an array");

  Dataset ds;
  for (const auto& rec : doc) {
    Sample s;
    try {
      s.id = rec.at("id").get<std::string>();
      s.width = rec.at("width").get<int>();
      s.height = rec.at("height").get<int>();
      for (const auto& jb : rec.at("boxes")) {
        Box b;
        b.x1 = jb.at("x1").get<float>();
        b.y1 = jb.at("y1").get<float>();
        b.x2 = jb.at("x2").get<float>();
        b.y2 = jb.at("y2").get<float>();
        b.cls = jb.at("class").get<int>();
        s.boxes.push_back(b);
      }
    } catch (const json::exception& e) {
      bad_record(ann_path, std::string(e.what()) + (s.id.empty() ? "" : " at id " + s.id));
    }
    validate_sample(s, ann_path);

    const fs::path img_path = fs::path(root) / "images" / (s.id + ".png");
    if (!fs::exists(img_path)) throw std::runtime_error("missing image file " + img_path.string());
    s.image = img::read_png(img_path.string());
    if (s.image.width != s.width || s.image.height != s.height)
      bad_record(ann_path, "image size does not match record for id " + s.id);

    const fs::path mask_path = fs::path(root) / "masks" / (s.id + ".png");
    if (fs::exists(mask_path)) {
      s.mask = img::read_png(mask_path.string());
      if (s.mask.channels != 1)
        throw std::runtime_error("mask must be single channel: " + mask_path.string());
      if (s.mask.width != s.width || s.mask.height != s.height)
        bad_record(ann_path, "mask size does not match record for id " + s.id);
      s.has_mask = true;
    }
    ds.samples.push_back(std::move(s));
  }

  std::sort(ds.samples.begin(), ds.samples.end(),
            [](const Sample& a, const Sample& b) { return a.id < b.id; });
  for (size_t i = 1; i < ds.samples.size(); ++i)
    if (ds.samples[i].id == ds.samples[i - 1].id)
      bad_record(ann_path, "duplicate id " + ds.samples[i].id);

  for (const auto& s : ds.samples) {
    for (const auto& b : s.boxes) ds.num_det_classes = std::max(ds.num_det_classes, b.cls);
    if (s.has_mask)
      for (uint8_t px : s.mask.pixels)
        if (px != 255) ds.num_seg_classes = std::max(ds.num_seg_classes, static_cast<int>(px) + 1);
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& root) {
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "masks");

  std::vector<const Sample*> order;
  for (const auto& s : ds.samples) order.push_back(&s);
  std::sort(order.begin(), order.end(),
            [](const Sample* a, const Sample* b) { return a->id < b->id; });

  json arr = json::array();
  for (const Sample* s : order) {
    json rec;
    rec["id"] = s->id;
    rec["width"] = s->width;
    rec["height"] = s->height;
    json boxes = json::array();
    for (const auto& b : s->boxes)
      boxes.push_back({{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}, {"class", b.cls}});
    rec["boxes"] = std::move(boxes);
    arr.push_back(std::move(rec));

    img::write_png((fs::path(root) / "images" / (s->id + ".png")).string(), s->image);
    if (s->has_mask) img::write_png((fs::path(root) / "masks" / (s->id + ".png")).string(), s->mask);
  }

  std::ofstream out((fs::path(root) / "annotations.json").string());
  out << arr.dump(2) << "\n";
}

IdList load_id_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed id list " + path + ": " + e.what());
  }
  IdList out;
  for (const auto& rec : doc) {
    out.ids.push_back(rec.at("id").get<std::string>());
    out.has_mask.push_back(rec.at("has_mask").get<bool>() ? 1 : 0);
  }
  return out;
}

void save_id_list(const IdList& list, const std::string& path) {
  json arr = json::array();
  for (size_t i = 0; i < list.ids.size(); ++i)
    arr.push_back({{"id", list.ids[i]}, {"has_mask", list.has_mask[i] != 0}});
  std::ofstream out(path);
  out << arr.dump() << "\n";
}

PartialSplit load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json doc;
  in >> doc;
  PartialSplit s;
  s.seed = doc.at("seed").get<uint64_t>();
  s.det_ids = doc.at("det_ids").get<std::vector<std::string>>();
  s.seg_ids = doc.at("seg_ids").get<std::vector<std::string>>();
  return s;
}

void save_split(const PartialSplit& split, const std::string& path) {
  json doc;
  doc["seed"] = split.seed;
  doc["det_ids"] = split.det_ids;
  doc["seg_ids"] = split.seg_ids;
  std::ofstream out(path);
  out << doc.dump(2) << "\n";
}

}  // namespace detseg::data
