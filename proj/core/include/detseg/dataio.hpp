#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "detseg/pngio.hpp"

namespace detseg::data {

enum class TaskTag { DET, SEG };

const char* task_name(TaskTag t);

// Corner box in absolute pixels, inclusive-exclusive (a mask occupying pixel
// columns [x1, x2) maps to exactly this box). cls is 1-based; 0 is background.
struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int cls = 0;
};

struct Sample {
  std::string id;
  int width = 0;
  int height = 0;
  std::vector<Box> boxes;
  bool has_mask = false;
  img::ImageU8 image;  // RGB
  img::ImageU8 mask;   // gray: class id per pixel, 255 ignore; empty if !has_mask
};

struct Dataset {
  std::vector<Sample> samples;  // sorted by id
  int num_det_classes = 0;      // highest box class id seen
  int num_seg_classes = 0;      // highest mask class id (excluding 255) + 1

  const Sample* find(const std::string& id) const;
  int index_of(const std::string& id) const;  // -1 if absent
};

struct PartialSplit {
  std::vector<std::string> det_ids;  // sorted
  std::vector<std::string> seg_ids;  // sorted
  uint64_t seed = 0;
};

struct SplitOptions {
  double det_fraction = 0.5;
  // When >= 0, the seg side gets exactly this many mask-bearing ids and
  // det_fraction is ignored. The VOC preset pins 7656 here.
  int seg_count = -1;
};

// Bare id list, enough to drive a split without pixel data on hand.
struct IdList {
  std::vector<std::string> ids;
  std::vector<uint8_t> has_mask;  // parallel to ids
};

PartialSplit split_partial(const IdList& pool, uint64_t seed, const SplitOptions& opt = {});
PartialSplit split_partial(const Dataset& ds, uint64_t seed, const SplitOptions& opt = {});

PartialSplit halve_subset(const PartialSplit& split, TaskTag which, uint64_t seed);

struct ScheduledBatch {
  TaskTag tag;
  std::vector<std::string> ids;
};

enum class ScheduleMode { EPOCH, ITERATION };

struct EpochSchedule {
  std::vector<ScheduledBatch> batches;
  ScheduleMode mode = ScheduleMode::EPOCH;
};

// Builds one epoch's batch order. The smaller subset is padded with whole
// reshuffled passes over itself (truncating the last pass), so its ids repeat
// as evenly as possible and the larger subset's ids each appear exactly once.
// In EPOCH mode the det block comes first on even epochs.
EpochSchedule make_epoch_schedule(const PartialSplit& split, int batch_size, ScheduleMode mode,
                                  uint64_t seed, int epoch = 0);

struct ClassMap {
  std::map<int, int> mapping;            // source class id -> group id
  std::vector<std::string> group_names;  // 1-based group labels
};

// The VOC 20-class to 4-group merge: vehicle, animal, furniture, person.
ClassMap voc_group_map();

// Replaces every mask pixel by its group id; 0 and 255 pass through; box
// classes are untouched. Unmapped ids raise an error naming the id.
Dataset remap_classes(const Dataset& ds, const ClassMap& map);

Dataset load_dataset(const std::string& root);
void save_dataset(const Dataset& ds, const std::string& root);

IdList load_id_list(const std::string& path);
void save_id_list(const IdList& list, const std::string& path);

PartialSplit load_split(const std::string& path);
void save_split(const PartialSplit& split, const std::string& path);

}  // namespace detseg::data
