#pragma once

#include <random>
#include <string>
#include <vector>

#include "discn/pipeline.hpp"
#include "discn/tensor.hpp"

namespace discn {

using StimulusSet = StimulusSetT<float>;
using HeatmapStack = HeatmapStackT<float>;

// One drawn object: a filled disc with its own depth plane.
struct SceneObject {
  double cx = 0, cy = 0;   // center, pixels
  double radius = 0;       // pixels
  float color[3] = {0, 0, 0};
  float depth = 0;         // [0,1], larger = nearer
};

struct SceneSpec {
  long image_size = 64;
  std::vector<SceneObject> objects;
  float background_depth = 0.1f;
};

struct GazeProfile {
  std::string group = "NC";     // "NC" or "AD"
  double sigma_fix = 1.5;       // fixation scatter around a target, pixels
  double salient_bias = 0.9;    // P(fixation targets a true object)
  double mean_duration_ms = 250;
  double std_duration_ms = 80;
  int fixation_count = 12;
};

struct Fixation {
  double x = 0, y = 0;
  double duration_ms = 0;
};

struct SubjectInfo {
  std::string id;
  int label = 0;  // 0 = AD, 1 = NC (as stored)
};

struct DatasetManifest {
  long n_stimuli = 5;
  long image_size = 64;
  long channels = 3;
  std::uint64_t seed = 0;
  double divergence = 1.0;
  std::vector<SubjectInfo> subjects;       // 1:1 AD:NC
  std::vector<std::string> normal_ids;     // disjoint normal-control pool
};

struct Dataset {
  DatasetManifest manifest;
  StimulusSet stimuli;
  std::vector<HeatmapStack> subject_heatmaps;  // aligned with manifest.subjects
  std::vector<HeatmapStack> normal_heatmaps;   // aligned with manifest.normal_ids
};

// Gaze statistics per group. divergence 0 makes AD identical to NC; higher
// values lower the AD on-object bias and widen its scatter.
GazeProfile nc_profile(long image_size);
GazeProfile ad_profile(long image_size, double divergence);

std::vector<SceneSpec> gen_scenes(std::uint64_t seed, long image_size, long n);
StimulusSet render_stimuli(const std::vector<SceneSpec>& scenes, long channels = 3);

std::vector<Fixation> simulate_fixations(const GazeProfile& profile, const SceneSpec& scene,
                                         std::mt19937_64& rng);

// Duration-weighted sum of isotropic Gaussians, max-normalized to [0,1] and
// replicated across channels. An empty fixation list yields an all-zero map
// (reported through all_zero when given).
Tensor<float> fixations_to_heatmap(const std::vector<Fixation>& fixes, long image_size, long channels,
                                   double sigma_heat, bool* all_zero = nullptr);

inline double default_heat_sigma(long image_size) { return static_cast<double>(image_size) / 22.0; }

struct GenConfig {
  std::uint64_t seed = 7;
  long image_size = 64;
  long n_stimuli = 5;
  long n_subjects = 40;  // split 1:1 AD:NC
  long n_normals = 8;
  double divergence = 1.0;
  long channels = 3;
};

Dataset generate_dataset(const GenConfig& cfg);

// Directory layout: manifest.json + stimuli/{rgb,depth}_###.dscnt +
// subjects/<id>/heat_###.dscnt + normals/<id>/heat_###.dscnt.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);

// Content fingerprint over the manifest and every tensor payload; identical
// for a dataset and its written-then-read copy.
std::uint64_t dataset_content_hash(const Dataset& ds);

// Stimuli and heatmaps larger than 224 are center-cropped to 224 before
// modeling.
Tensor<float> center_crop(const Tensor<float>& maps, long target);

}  // namespace discn
