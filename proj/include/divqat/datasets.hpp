// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "divqat/rng.hpp"
#include "divqat/tensor.hpp"

namespace divqat {

enum class TaskKind { GaussianBlobs, RingPatterns, TexturedPatches };

TaskKind parse_task_kind(const std::string& s);
std::string task_kind_name(TaskKind k);

/// Synthetic classification task. Geometry (class means, ring radii,
/// grating orientations) is a pure function of (kind, num_classes,
/// input_shape, spread); per-sample noise comes from `seed`.
struct TaskSpec {
  TaskKind kind = TaskKind::TexturedPatches;
  int num_classes = 10;
  std::vector<int> input_shape = {8, 8, 1};
  int train_samples = 2000;
  int test_samples = 1000;
  uint64_t seed = 1;
  double spread = 1.0;  // scales class scatter around the fixed geometry

  int64_t flat_dim() const;
  void validate() const;  // ConfigError on bad K, extents, sample counts
};

struct Dataset {
  Tensor inputs;            // [N, ...] in [0,1] per coordinate
  std::vector<int> labels;  // size N, values in [0, K)
  int num_classes = 0;

  int64_t size() const { return batch_rows(inputs); }
};

struct SplitDataset {
  TaskSpec task;
  Dataset train;
  Dataset test;
};

/// Deterministic generation; labels balanced within one sample per
/// class; train and test drawn from independent derived streams.
SplitDataset generate(const TaskSpec& task);

enum class Relation { InDistribution, NearDistribution, OutOfDistribution };

Relation parse_relation(const std::string& s);
std::string relation_name(Relation r);

struct DistributionRelation {
  Relation relation = Relation::OutOfDistribution;
  /// Geometry displacement for near_distribution, in class-scatter units.
  double shift = 2.0;
};

/// Unlabeled surrogate inputs for an attacker. Never returns a row that
/// exactly matches a victim train or test row (hash scan + redraw).
/// out_of_distribution rows are rejection-sampled outside every class's
/// 3-sigma region.
Tensor adversary_variant(const TaskSpec& task, const DistributionRelation& rel,
                         uint64_t seed, int count, const SplitDataset& victim);

/// Fraction of rows falling outside every class's 3-sigma region of the
/// task (ball around a blob mean, annulus around a ring, quadrature
/// projection band for gratings).
double fraction_outside_regions(const TaskSpec& task, const Tensor& inputs);

// ---- persistence -----------------------------------------------------

enum class ContainerKind : uint8_t { Labeled = 0, SoftLabeled = 1, Unlabeled = 2 };

struct Container {
  ContainerKind kind = ContainerKind::Unlabeled;
  Tensor inputs;
  std::vector<int> labels;  // Labeled
  Tensor soft_labels;       // SoftLabeled, [N, K]
  int num_classes = 0;
};

/// Versioned binary container; little-endian throughout.
void save_container(const std::string& path, const Container& c);
Container load_container(const std::string& path);

void save_dataset(const std::string& path, const Dataset& d);
Dataset load_dataset(const std::string& path);

/// CSV debug form mirroring the container (metadata comment line, then
/// one row per sample, %.9g floats so 32-bit values round-trip exactly).
void export_csv(const std::string& path, const Container& c);

/// Reads `csv` (ours or plain feature rows with a trailing integer
/// label) or `idx` (ubyte image file; label file located by replacing
/// "images"->"labels" and "idx3"->"idx1" in the name). Inputs outside
/// [0,1] are min-max normalized; in-range data is left untouched.
Dataset import_external(const std::string& path, const std::string& format);

}  // namespace divqat
