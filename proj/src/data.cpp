#include "discn/data.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "discn/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace discn {

GazeProfile nc_profile(long image_size) {
  GazeProfile p;
  p.group = "NC";
  p.sigma_fix = static_cast<double>(image_size) / 42.0;
  p.salient_bias = 0.9;
  p.mean_duration_ms = 250;
  p.std_duration_ms = 80;
  p.fixation_count = 12;
  return p;
}

GazeProfile ad_profile(long image_size, double divergence) {
  GazeProfile p = nc_profile(image_size);
  p.group = "AD";
  // divergence 0 reproduces the NC parameters exactly; 1 is the fully
  // divergent regime: mostly untargeted fixations with a wide scatter.
  p.salient_bias = 0.9 - divergence * 0.75;
  p.sigma_fix *= 1.0 + 3.0 * divergence;
  return p;
}

std::vector<SceneSpec> gen_scenes(std::uint64_t seed, long image_size, long n) {
  require(n >= 1, ErrorKind::Contract, "gen_scenes requires n >= 1");
  std::vector<SceneSpec> scenes;
  scenes.reserve(static_cast<size_t>(n));
  for (long i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(seed, 0x7363656eULL, static_cast<std::uint64_t>(i)));
    std::uniform_int_distribution<int> n_obj(2, 4);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    SceneSpec sc;
    sc.image_size = image_size;
    sc.background_depth = static_cast<float>(0.05 + 0.1 * unit(rng));
    int k = n_obj(rng);
    double margin = image_size / 6.0;
    for (int j = 0; j < k; ++j) {
      SceneObject o;
      o.cx = margin + unit(rng) * (image_size - 2 * margin);
      o.cy = margin + unit(rng) * (image_size - 2 * margin);
      o.radius = image_size * (0.06 + 0.08 * unit(rng));
      for (int c = 0; c < 3; ++c) o.color[c] = static_cast<float>(0.3 + 0.7 * unit(rng));
      o.depth = static_cast<float>(0.5 + 0.5 * unit(rng));
      sc.objects.push_back(o);
    }
    scenes.push_back(std::move(sc));
  }
  return scenes;
}

StimulusSet render_stimuli(const std::vector<SceneSpec>& scenes, long channels) {
  require(!scenes.empty(), ErrorKind::Contract, "render_stimuli: empty scene list");
  long n = static_cast<long>(scenes.size());
  long size = scenes[0].image_size;
  Tensor<float> rgb = Tensor<float>::zeros({n, channels, size, size});
  Tensor<float> depth = Tensor<float>::zeros({n, channels, size, size});
  auto& rv = rgb.mutable_data();
  auto& dv = depth.mutable_data();
  for (long i = 0; i < n; ++i) {
    const SceneSpec& sc = scenes[static_cast<size_t>(i)];
    require(sc.image_size == size, ErrorKind::Contract, "render_stimuli: mixed image sizes");
    std::mt19937_64 tex_rng(derive_seed(0x746578ULL, static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> noise(0.0, 0.08);
    for (long y = 0; y < size; ++y) {
      for (long x = 0; x < size; ++x) {
        // textured background: gentle gradient plus noise
        float base = static_cast<float>(0.2 + 0.1 * (static_cast<double>(y) / size) + noise(tex_rng));
        float pix[3] = {base, base, base};
        float dep = sc.background_depth;
        for (const auto& o : sc.objects) {
          double dx = x - o.cx, dy = y - o.cy;
          if (dx * dx + dy * dy <= o.radius * o.radius) {
            pix[0] = o.color[0];
            pix[1] = o.color[1];
            pix[2] = o.color[2];
            dep = o.depth;
          }
        }
        for (long c = 0; c < channels; ++c) {
          rv[((i * channels + c) * size + y) * size + x] = pix[c % 3];
          dv[((i * channels + c) * size + y) * size + x] = dep;
        }
      }
    }
  }
  StimulusSet out;
  out.rgb = rgb;
  out.depth = depth;
  for (long i = 0; i < n; ++i) out.stimulus_ids.push_back("stim_" + std::to_string(i));
  return out;
}

std::vector<Fixation> simulate_fixations(const GazeProfile& profile, const SceneSpec& scene,
                                         std::mt19937_64& rng) {
  require(profile.fixation_count >= 0, ErrorKind::Contract, "negative fixation count");
  require(profile.salient_bias >= 0.0 && profile.salient_bias <= 1.0, ErrorKind::Contract,
          "salient_bias must lie in [0,1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> scatter(0.0, 1.0);
  std::normal_distribution<double> dur(profile.mean_duration_ms, profile.std_duration_ms);
  double lim = static_cast<double>(scene.image_size) - 1e-3;
  std::vector<Fixation> out;
  out.reserve(static_cast<size_t>(profile.fixation_count));
  for (int i = 0; i < profile.fixation_count; ++i) {
    Fixation f;
    bool on_object = !scene.objects.empty() && unit(rng) < profile.salient_bias;
    if (on_object) {
      size_t oi = static_cast<size_t>(unit(rng) * static_cast<double>(scene.objects.size()));
      oi = std::min(oi, scene.objects.size() - 1);
      const auto& o = scene.objects[oi];
      f.x = o.cx + scatter(rng) * profile.sigma_fix;
      f.y = o.cy + scatter(rng) * profile.sigma_fix;
    } else {
      f.x = unit(rng) * lim;
      f.y = unit(rng) * lim;
    }
    f.x = std::clamp(f.x, 0.0, lim);
    f.y = std::clamp(f.y, 0.0, lim);
    f.duration_ms = std::clamp(dur(rng), 80.0, 800.0);
    out.push_back(f);
  }
  return out;
}

Tensor<float> fixations_to_heatmap(const std::vector<Fixation>& fixes, long image_size, long channels,
                                   double sigma_heat, bool* all_zero) {
  Tensor<float> out = Tensor<float>::zeros({channels, image_size, image_size});
  if (fixes.empty()) {
    if (all_zero) *all_zero = true;
    return out;
  }
  if (all_zero) *all_zero = false;
  std::vector<double> acc(static_cast<size_t>(image_size * image_size), 0.0);
  double inv2s2 = 1.0 / (2.0 * sigma_heat * sigma_heat);
  for (const auto& f : fixes) {
    require(f.duration_ms > 0, ErrorKind::Contract, "fixation duration must be positive");
    require(f.x >= 0 && f.x < image_size && f.y >= 0 && f.y < image_size, ErrorKind::Contract,
            "fixation outside image bounds");
    for (long y = 0; y < image_size; ++y) {
      double dy = y - f.y;
      for (long x = 0; x < image_size; ++x) {
        double dx = x - f.x;
        acc[static_cast<size_t>(y * image_size + x)] += f.duration_ms * std::exp(-(dx * dx + dy * dy) * inv2s2);
      }
    }
  }
  double mx = 0.0;
  for (double v : acc) mx = std::max(mx, v);
  auto& ov = out.mutable_data();
  if (mx > 0.0) {
    for (long c = 0; c < channels; ++c)
      for (long i = 0; i < image_size * image_size; ++i)
        ov[c * image_size * image_size + i] = static_cast<float>(acc[static_cast<size_t>(i)] / mx);
  }
  return out;
}

namespace {

HeatmapStack subject_stack(const std::string& id, const GazeProfile& profile,
                           const std::vector<SceneSpec>& scenes, long channels, std::uint64_t seed) {
  long n = static_cast<long>(scenes.size());
  long size = scenes[0].image_size;
  HeatmapStack st;
  st.owner_id = id;
  st.maps = Tensor<float>::zeros({n, channels, size, size});
  auto& mv = st.maps.mutable_data();
  double sigma = default_heat_sigma(size);
  for (long i = 0; i < n; ++i) {
    std::mt19937_64 rng(derive_seed(seed, fnv1a64(id.data(), id.size()), static_cast<std::uint64_t>(i)));
    auto fixes = simulate_fixations(profile, scenes[static_cast<size_t>(i)], rng);
    Tensor<float> h = fixations_to_heatmap(fixes, size, channels, sigma);
    std::copy(h.data().begin(), h.data().end(), mv.begin() + i * channels * size * size);
  }
  return st;
}

}  // namespace

Dataset generate_dataset(const GenConfig& cfg) {
  require(cfg.n_subjects >= 2 && cfg.n_subjects % 2 == 0, ErrorKind::Config,
          "subject count must be even (1:1 AD:NC), got " + std::to_string(cfg.n_subjects));
  require(cfg.n_normals >= 0, ErrorKind::Config, "negative normal count");
  require(cfg.n_stimuli >= 1, ErrorKind::Config, "need at least one stimulus");

  Dataset ds;
  ds.manifest.n_stimuli = cfg.n_stimuli;
  ds.manifest.image_size = cfg.image_size;
  ds.manifest.channels = cfg.channels;
  ds.manifest.seed = cfg.seed;
  ds.manifest.divergence = cfg.divergence;

  auto scenes = gen_scenes(cfg.seed, cfg.image_size, cfg.n_stimuli);
  ds.stimuli = render_stimuli(scenes, cfg.channels);

  GazeProfile nc = nc_profile(cfg.image_size);
  GazeProfile ad = ad_profile(cfg.image_size, cfg.divergence);

  long half = cfg.n_subjects / 2;
  for (long i = 0; i < cfg.n_subjects; ++i) {
    bool is_ad = i < half;
    SubjectInfo info;
    info.id = (is_ad ? "ad_" : "nc_") + std::to_string(is_ad ? i : i - half);
    info.label = is_ad ? 0 : 1;
    ds.manifest.subjects.push_back(info);
    ds.subject_heatmaps.push_back(
        subject_stack(info.id, is_ad ? ad : nc, scenes, cfg.channels, derive_seed(cfg.seed, 0x73756232ULL)));
  }
  for (long i = 0; i < cfg.n_normals; ++i) {
    std::string id = "norm_" + std::to_string(i);
    ds.manifest.normal_ids.push_back(id);
    ds.normal_heatmaps.push_back(subject_stack(id, nc, scenes, cfg.channels, derive_seed(cfg.seed, 0x6e6f726dULL)));
  }
  return ds;
}

namespace {

std::string idx3(long i) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%03ld", i);
  return buf;
}

void write_stack(const Tensor<float>& maps, const std::string& dir, const std::string& prefix) {
  const Shape& s = maps.shape();
  long n = s[0], per = s[1] * s[2] * s[3];
  for (long i = 0; i < n; ++i) {
    Shape one = {s[1], s[2], s[3]};
    write_dscnt(dir + "/" + prefix + "_" + idx3(i) + ".dscnt", one, maps.data().data() + i * per);
  }
}

Tensor<float> read_stack(const std::string& dir, const std::string& prefix, long n, const Shape& per_shape) {
  Tensor<float> out = Tensor<float>::zeros({n, per_shape[0], per_shape[1], per_shape[2]});
  long per = numel(per_shape);
  auto& ov = out.mutable_data();
  for (long i = 0; i < n; ++i) {
    std::string path = dir + "/" + prefix + "_" + idx3(i) + ".dscnt";
    auto [shape, data] = read_dscnt(path);
    if (shape != per_shape)
      throw IntegrityError("tensor shape " + shape_str(shape) + " in " + path +
                           " does not match manifest shape " + shape_str(per_shape));
    std::copy(data.begin(), data.end(), ov.begin() + i * per);
  }
  return out;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
  const auto& m = ds.manifest;
  require(static_cast<long>(ds.subject_heatmaps.size()) == static_cast<long>(m.subjects.size()),
          ErrorKind::Integrity, "subject heatmap count does not match manifest");
  require(static_cast<long>(ds.normal_heatmaps.size()) == static_cast<long>(m.normal_ids.size()),
          ErrorKind::Integrity, "normal heatmap count does not match manifest");

  fs::create_directories(dir + "/stimuli");
  json j;
  j["version"] = "discn-ds/1";
  j["n_stimuli"] = m.n_stimuli;
  j["image_size"] = m.image_size;
  j["channels"] = m.channels;
  j["seed"] = m.seed;
  j["divergence"] = m.divergence;
  json subs = json::array();
  for (const auto& s : m.subjects) subs.push_back({{"id", s.id}, {"label", s.label}});
  j["subjects"] = subs;
  j["normals"] = m.normal_ids;
  {
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw IoError("cannot write " + dir + "/manifest.json");
    f << j.dump(2) << '\n';
  }
  write_stack(ds.stimuli.rgb, dir + "/stimuli", "rgb");
  write_stack(ds.stimuli.depth, dir + "/stimuli", "depth");
  for (size_t i = 0; i < m.subjects.size(); ++i) {
    std::string sdir = dir + "/subjects/" + m.subjects[i].id;
    fs::create_directories(sdir);
    write_stack(ds.subject_heatmaps[i].maps, sdir, "heat");
  }
  for (size_t i = 0; i < m.normal_ids.size(); ++i) {
    std::string ndir = dir + "/normals/" + m.normal_ids[i];
    fs::create_directories(ndir);
    write_stack(ds.normal_heatmaps[i].maps, ndir, "heat");
  }
}

Dataset read_dataset(const std::string& dir) {
  std::ifstream f(dir + "/manifest.json");
  if (!f) throw IoError("cannot read " + dir + "/manifest.json");
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("bad dataset manifest: ") + e.what());
  }
  if (!j.contains("version") || j["version"] != "discn-ds/1")
    throw IntegrityError("unsupported dataset version in " + dir);

  Dataset ds;
  auto& m = ds.manifest;
  m.n_stimuli = j.at("n_stimuli").get<long>();
  m.image_size = j.at("image_size").get<long>();
  m.channels = j.at("channels").get<long>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.divergence = j.at("divergence").get<double>();
  for (const auto& s : j.at("subjects"))
    m.subjects.push_back({s.at("id").get<std::string>(), s.at("label").get<int>()});
  for (const auto& s : j.at("normals")) m.normal_ids.push_back(s.get<std::string>());

  long ad = 0, nc = 0;
  for (const auto& s : m.subjects) (s.label == 0 ? ad : nc)++;
  if (ad != nc) throw IntegrityError("manifest subject set is not 1:1 AD:NC");

  Shape per = {m.channels, m.image_size, m.image_size};
  ds.stimuli.rgb = read_stack(dir + "/stimuli", "rgb", m.n_stimuli, per);
  ds.stimuli.depth = read_stack(dir + "/stimuli", "depth", m.n_stimuli, per);
  for (long i = 0; i < m.n_stimuli; ++i) ds.stimuli.stimulus_ids.push_back("stim_" + std::to_string(i));
  for (const auto& s : m.subjects) {
    HeatmapStack st;
    st.owner_id = s.id;
    st.maps = read_stack(dir + "/subjects/" + s.id, "heat", m.n_stimuli, per);
    ds.subject_heatmaps.push_back(std::move(st));
  }
  for (const auto& id : m.normal_ids) {
    HeatmapStack st;
    st.owner_id = id;
    st.maps = read_stack(dir + "/normals/" + id, "heat", m.n_stimuli, per);
    ds.normal_heatmaps.push_back(std::move(st));
  }
  return ds;
}

std::uint64_t dataset_content_hash(const Dataset& ds) {
  const auto& m = ds.manifest;
  json j;
  j["n_stimuli"] = m.n_stimuli;
  j["image_size"] = m.image_size;
  j["channels"] = m.channels;
  j["seed"] = m.seed;
  j["divergence"] = m.divergence;
  for (const auto& s : m.subjects) j["subjects"].push_back({{"id", s.id}, {"label", s.label}});
  j["normals"] = m.normal_ids;
  std::string dump = j.dump();
  std::uint64_t h = fnv1a64(dump.data(), dump.size());
  auto mix_tensor = [&h](const Tensor<float>& t) {
    h = fnv1a64(t.data().data(), t.data().size() * sizeof(float), h);
  };
  mix_tensor(ds.stimuli.rgb);
  mix_tensor(ds.stimuli.depth);
  for (const auto& s : ds.subject_heatmaps) mix_tensor(s.maps);
  for (const auto& s : ds.normal_heatmaps) mix_tensor(s.maps);
  return h;
}

Tensor<float> center_crop(const Tensor<float>& maps, long target) {
  const Shape& s = maps.shape();
  require_dim(s.size() == 4, "center_crop expects [N,C,H,W]");
  long H = s[2], W = s[3];
  if (H <= target && W <= target) return maps;
  long oh = std::min(H, target), ow = std::min(W, target);
  long y0 = (H - oh) / 2, x0 = (W - ow) / 2;
  Tensor<float> out = Tensor<float>::zeros({s[0], s[1], oh, ow});
  auto& ov = out.mutable_data();
  const auto& iv = maps.data();
  for (long b = 0; b < s[0]; ++b)
    for (long c = 0; c < s[1]; ++c)
      for (long y = 0; y < oh; ++y)
        for (long x = 0; x < ow; ++x)
          ov[((b * s[1] + c) * oh + y) * ow + x] = iv[((b * s[1] + c) * H + y0 + y) * W + x0 + x];
  return out;
}

}  // namespace discn
