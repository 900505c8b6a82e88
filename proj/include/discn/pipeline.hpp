#pragma once

#include "discn/saa.hpp"

namespace discn {

enum class Provenance { Preliminary, Subject, Comprehensive };

template <class T>
struct SaliencyMaps {
  Tensor<T> maps;  // [N,C,H,W]
  Provenance provenance = Provenance::Preliminary;
  std::string owner;    // subject id for Provenance::Subject
  int iterations = 0;   // fused normal count for Provenance::Comprehensive
};

template <class T>
struct StimulusSetT {
  Tensor<T> rgb;    // [N,C,H,W], values in [0,1]
  Tensor<T> depth;  // same shape, depth replicated across channels
  std::vector<std::string> stimulus_ids;
};

template <class T>
struct HeatmapStackT {
  Tensor<T> maps;  // [N,C,H,W], per-map values in [0,1]
  std::string owner_id;
};

template <class T>
SaliencyMaps<T> pre_saliency(const StimulusSetT<T>& stimuli, SaaBlock<T>& saa_depth) {
  return {saa_depth.forward(stimuli.rgb, stimuli.depth), Provenance::Preliminary, "", 0};
}

template <class T>
SaliencyMaps<T> fuse_subject(const SaliencyMaps<T>& pre, const HeatmapStackT<T>& h, SaaBlock<T>& saa_gaze) {
  return {saa_gaze.forward(pre.maps, h.maps), Provenance::Subject, h.owner_id, 0};
}

// I_0 = pre; I_{i+1} = SAA(I_i, H_{i+1}); returns I_n. One SAA call per
// normal; an empty list returns the preliminary maps unchanged.
template <class T>
SaliencyMaps<T> fuse_normals_iterative(const SaliencyMaps<T>& pre, const std::vector<HeatmapStackT<T>>& normals,
                                       SaaBlock<T>& saa_gaze) {
  Tensor<T> acc = pre.maps;
  for (const auto& h : normals) acc = saa_gaze.forward(acc, h.maps);
  return {acc, Provenance::Comprehensive, "", static_cast<int>(normals.size())};
}

}  // namespace discn
