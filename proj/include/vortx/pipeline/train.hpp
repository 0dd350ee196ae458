#pragma once

// Two-phase training on random subcrops with teacher-forced hierarchies.

#include "vortx/fuse_tsdf.hpp"
#include "vortx/nn/optim.hpp"
#include "vortx/pipeline/dataset.hpp"
#include "vortx/pipeline/forward.hpp"
#include "vortx/pipeline/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace vortx {

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Bernoulli(keep) subsample of the active set, order preserved. A non-empty
/// input never comes back empty.
template <class Rng>
std::vector<Coord> voxel_dropout(const std::vector<Coord>& active, double keep, Rng& rng) {
  if (!(keep > 0 && keep <= 1)) throw Error("voxel_dropout: keep fraction must lie in (0, 1]");
  if (keep >= 1) return active;
  std::vector<Coord> out;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const auto& c : active)
    if (u(rng) < keep) out.push_back(c);
  if (out.empty() && !active.empty()) out.push_back(active[std::uniform_int_distribution<std::size_t>(0, active.size() - 1)(rng)]);
  return out;
}

/// A scene prepared for training: ground truth, keyframes, shading images.
struct TrainingScene {
  const Scene* scene = nullptr;
  GroundTruth gt;
  std::vector<std::size_t> keyframes;
};

inline TrainingScene prepare_training_scene(const Scene& s, const PipelineConfig& cfg) {
  if (!s.has_shading()) throw Error("training scene " + s.name + " has no shading images");
  TrainingScene t;
  t.scene = &s;
  t.gt = scene_ground_truth(s, cfg.truncation, cfg.max_depth);
  t.keyframes = select_keyframes(s.poses, cfg.rmax_deg, cfg.tmax_train);
  return t;
}

struct LossTerms {
  // projective occupancy (coarse, medium, fine), occupancy (coarse, medium), tsdf
  std::array<double, 6> terms{};
  double total = 0;
};

inline const char* loss_term_name(int i) {
  static const char* names[6] = {"proj_coarse", "proj_medium", "proj_fine", "occ_coarse", "occ_medium", "tsdf"};
  return names[i];
}

template <class T>
struct CropLoss {
  nn::Tensor<T> total;
  LossTerms values;
};

/// All coarse voxels of a crop, in canonical order.
inline std::vector<Coord> crop_coarse_coords(const CropSize& size) {
  std::vector<Coord> out;
  for (int x = 0; x < size.x / 4; ++x)
    for (int y = 0; y < size.y / 4; ++y)
      for (int z = 0; z < size.z / 4; ++z) out.push_back({x, y, z});
  return out;
}

/// Children of every occupied voxel, sorted.
inline std::vector<Coord> children_of_occupied(const SparseVoxelGrid<bool>& occ) {
  std::vector<Coord> out;
  for (std::size_t i = 0; i < occ.size(); ++i)
    if (occ.value(i))
      for (int c = 0; c < 8; ++c) out.push_back(occ.coord(i).child(c));
  std::sort(out.begin(), out.end());
  return out;
}

/// Forward + losses on one crop. Active sets come from ground truth.
template <class T, class Rng>
CropLoss<T> crop_loss(const ModelBundle<T>& model, const TrainingScene& ts, const TrainingCrop& crop,
                      std::span<const std::size_t> view_ids, Aggregation mode, bool train_features, double keep,
                      Rng& rng) {
  const auto& cfg = model.config();
  const Scene& scene = *ts.scene;
  std::vector<FeaturePyramid<T>> pyramids;
  pyramids.reserve(view_ids.size());
  for (auto id : view_ids) pyramids.push_back(model.features().extract(scene.shading[id], train_features));
  std::vector<ViewInput<T>> views;
  for (std::size_t j = 0; j < view_ids.size(); ++j)
    views.push_back({&scene.k, crop.transform.apply(scene.poses[view_ids[j]]), &pyramids[j], &scene.depth[view_ids[j]]});
  std::vector<std::int32_t> all(views.size());
  std::iota(all.begin(), all.end(), 0);
  auto lists = [&](std::size_t) -> const std::vector<std::int32_t>& { return all; };

  std::vector<nn::Tensor<T>> terms(6);
  CropLoss<T> out;
  std::vector<Coord> active = crop_coarse_coords(crop.size);
  LevelResult<T> prev;
  bool have_prev = false;
  for (Level l : kLevels) {
    const auto& target = crop.at(l);
    std::vector<Coord> coords = voxel_dropout(active, keep, rng);
    const int li = int(l);
    if (coords.empty()) {
      terms[std::size_t(li)] = nn::Tensor<T>::scalar(T(0));
      if (l != Level::fine) terms[std::size_t(3 + li)] = nn::Tensor<T>::scalar(T(0));
      else terms[5] = nn::Tensor<T>::scalar(T(0));
    } else {
      LevelResult<T> r = run_level<T>(model, l, std::move(coords), views, lists, mode, have_prev ? &prev : nullptr);
      std::vector<T> pt;
      std::vector<std::uint8_t> pm;
      projective_targets<T>(l, r.coords, views, r.samples.info, cfg.truncation, cfg.max_depth, pt, pm);
      terms[std::size_t(li)] = nn::bce_loss(r.fusion.logits, pt, pm);

      std::vector<T> y(r.coords.size(), T(0));
      std::vector<std::uint8_t> m(r.coords.size(), 0);
      for (std::size_t i = 0; i < r.coords.size(); ++i) {
        const bool* sup = target.supervised.find(r.coords[i]);
        if (!sup || !*sup) continue;
        m[i] = 1;
        if (l == Level::fine) {
          const float* s = crop.tsdf.find(r.coords[i]);
          y[i] = s ? T(*s) : T(1);
        } else {
          const bool* occ = target.occupied.find(r.coords[i]);
          y[i] = occ && *occ ? T(1) : T(0);
        }
      }
      if (l == Level::fine) terms[5] = nn::log_tsdf_l1(r.net.prediction, y, m);
      else terms[std::size_t(3 + li)] = nn::bce_loss(r.net.prediction, y, m);
      prev = std::move(r);
      have_prev = true;
    }
    if (l != Level::fine) active = children_of_occupied(target.occupied);
  }
  out.total = nn::total_loss(terms);
  for (int i = 0; i < 6; ++i) out.values.terms[std::size_t(i)] = double(terms[std::size_t(i)].item());
  out.values.total = double(out.total.item());
  return out;
}

struct TrainLog {
  std::ostream* out = nullptr;
  int every = 10;
};

struct PhaseReport {
  int steps = 0;
  double last_loss = 0;
  double val_loss = 0;
};

class Divergence : public Error {
 public:
  using Error::Error;
};

/// Optimizer and data-order state; copying it branches a run.
template <class T>
struct TrainerState {
  nn::Adam<T> opt{nn::AdamConfig{}};
  std::mt19937_64 rng;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
};

template <class T>
class Trainer {
 public:
  Trainer(ModelBundle<T>& model, std::span<const TrainingScene> train, std::span<const TrainingScene> val,
          TrainLog log = {})
      : model_(model), train_(train), val_(val), log_(log) {
    if (train_.empty()) throw Error("train: no training scenes");
    const auto& cfg = model_.config();
    nn::AdamConfig ac;
    ac.lr = cfg.phase1.lr;
    ac.warmup_steps = cfg.effective_warmup();
    state_.opt = nn::Adam<T>(ac);
    state_.rng.seed(mix_seed(cfg.seed, 1));
  }

  /// Steps for a phase: ceil(epochs * multiplier * scenes / batch), at least 1.
  int phase_steps(const PhaseSchedule& p) const {
    const double crops = p.epochs * model_.config().schedule_multiplier * double(train_.size());
    return std::max(1, int(std::ceil(crops / double(p.batch) - 1e-9)));
  }

  const TrainerState<T>& state() const { return state_; }
  void restore(const TrainerState<T>& s) { state_ = s; }

  /// Runs `steps` optimizer steps. Phase 1 uses mean aggregation with frozen
  /// image features; phase 2 uses occupancy-weighted aggregation and trains them.
  /// One Adam instance spans both phases; the phase only sets its learning rate.
  PhaseReport run_phase(int phase, const PhaseSchedule& sched, int steps, const std::string& rescue_path = {}) {
    const auto& cfg = model_.config();
    const Aggregation mode = phase == 2 ? Aggregation::occupancy_weighted : Aggregation::mean;
    const bool train_features = phase == 2;
    auto& rng = state_.rng;
    state_.opt.set_lr(sched.lr);
    const CropSize size{cfg.crop[0], cfg.crop[1], cfg.crop[2]};
    PhaseReport rep;
    std::vector<std::vector<T>> last_good;
    auto snapshot = [&] {
      last_good.clear();
      for (const auto& e : model_.params().entries()) last_good.push_back(e.second.value());
    };
    snapshot();
    for (int step = 0; step < steps; ++step) {
      LossTerms mean_terms;
      for (int b = 0; b < sched.batch; ++b) {
        if (state_.cursor == state_.order.size()) {
          state_.order.resize(train_.size());
          std::iota(state_.order.begin(), state_.order.end(), 0);
          std::shuffle(state_.order.begin(), state_.order.end(), rng);
          state_.cursor = 0;
        }
        const TrainingScene& ts = train_[state_.order[state_.cursor++]];
        const TrainingCrop crop = random_subcrop(ts.gt, size, rng, true);
        const auto ids = crop_views(ts, crop, cfg.n_train, rng);
        auto loss = crop_loss<T>(model_, ts, crop, ids, mode, train_features, cfg.keep_fraction, rng);
        nn::backward(nn::scale(loss.total, T(1) / T(sched.batch)));
        for (int i = 0; i < 6; ++i) mean_terms.terms[std::size_t(i)] += loss.values.terms[std::size_t(i)] / sched.batch;
        mean_terms.total += loss.values.total / sched.batch;
      }
      if (!std::isfinite(mean_terms.total) || !gradients_finite()) {
        auto& entries = model_.params().entries();
        for (std::size_t i = 0; i < entries.size(); ++i) entries[i].second.value() = last_good[i];
        if (!rescue_path.empty()) save_model(rescue_path, model_, {{"diverged_at_step", step}, {"phase", phase}});
        throw Divergence("training diverged in phase " + std::to_string(phase) + " at step " + std::to_string(step));
      }
      snapshot();
      state_.opt.step(model_.params(),
                      [&](const std::string& name) { return train_features || name.rfind("features.", 0) != 0; });
      model_.params().zero_grad();
      rep.steps = step + 1;
      rep.last_loss = mean_terms.total;
      if (log_.out && (step % log_.every == 0 || step + 1 == steps)) {
        *log_.out << "phase " << phase << " step " << step + 1 << "/" << steps << " lr " << state_.opt.current_lr()
                  << " loss " << mean_terms.total;
        for (int i = 0; i < 6; ++i) *log_.out << ' ' << loss_term_name(i) << ' ' << mean_terms.terms[std::size_t(i)];
        *log_.out << std::endl;
      }
    }
    return rep;
  }

  /// Mean total loss over fixed, unaugmented validation crops, without dropout.
  double validation_loss(Aggregation mode, int crops_per_scene = 4) const {
    if (val_.empty()) return std::numeric_limits<double>::quiet_NaN();
    nn::NoGrad guard;
    const auto& cfg = model_.config();
    const CropSize size{cfg.crop[0], cfg.crop[1], cfg.crop[2]};
    double sum = 0;
    int n = 0;
    for (std::size_t s = 0; s < val_.size(); ++s) {
      std::mt19937_64 rng(mix_seed(cfg.seed ^ 0x5eedULL, s));
      for (int c = 0; c < crops_per_scene; ++c) {
        const TrainingCrop crop = random_subcrop(val_[s].gt, size, rng, false);
        const auto ids = crop_views(val_[s], crop, cfg.n_train, rng);
        sum += crop_loss<T>(model_, val_[s], crop, ids, mode, false, 1.0, rng).values.total;
        ++n;
      }
    }
    return sum / n;
  }

  /// Views for a crop: up to n keyframes whose frustum meets the crop's world box.
  template <class Rng>
  static std::vector<std::size_t> crop_views(const TrainingScene& ts, const TrainingCrop& crop, int n, Rng& rng) {
    const double s = voxel_size(Level::fine);
    const Aabb world{crop.transform.crop_min,
                     crop.transform.crop_min + Vec3(crop.size.x, crop.size.y, crop.size.z) * s};
    return sample_views(ts.scene->k, std::span<const Pose>(ts.scene->poses), ts.keyframes, world, std::size_t(n), rng);
  }

 private:
  bool gradients_finite() const {
    for (const auto& e : model_.params().entries())
      for (T g : e.second.grad())
        if (!std::isfinite(g)) return false;
    return true;
  }

  ModelBundle<T>& model_;
  std::span<const TrainingScene> train_, val_;
  TrainLog log_;
  TrainerState<T> state_;
};

struct TrainResult {
  PhaseReport phase1, phase2;
};

/// Phase 1 then phase 2. When `control` is given it receives a copy of the
/// phase-1 model that keeps training in phase 1 for the phase-2 step count;
/// its validation loss lands in `control_report`.
template <class T>
TrainResult train_model(ModelBundle<T>& model, std::span<const TrainingScene> train,
                        std::span<const TrainingScene> val, TrainLog log = {}, const std::string& rescue_path = {},
                        ModelBundle<T>* control = nullptr, PhaseReport* control_report = nullptr) {
  const auto& cfg = model.config();
  Trainer<T> trainer(model, train, val, log);
  TrainResult r;
  r.phase1 = trainer.run_phase(1, cfg.phase1, trainer.phase_steps(cfg.phase1), rescue_path);
  r.phase1.val_loss = trainer.validation_loss(Aggregation::mean);
  const int steps2 = trainer.phase_steps(cfg.phase2);
  if (control) {
    control->copy_values_from(model);
    Trainer<T> branch(*control, train, val, log);
    branch.restore(trainer.state());
    PhaseReport c = branch.run_phase(1, cfg.phase1, steps2);
    c.val_loss = branch.validation_loss(Aggregation::mean);
    if (control_report) *control_report = c;
  }
  r.phase2 = trainer.run_phase(2, cfg.phase2, steps2, rescue_path);
  r.phase2.val_loss = trainer.validation_loss(Aggregation::occupancy_weighted);
  return r;
}

/// Splits scenes into training and validation sets (the last `val_scenes`).
inline void split_scenes(std::span<const Scene> scenes, const PipelineConfig& cfg, std::vector<TrainingScene>& train,
                         std::vector<TrainingScene>& val) {
  if (scenes.size() < 2) throw Error("train: need at least 2 scenes for a train/validation split");
  const std::size_t nval = std::min<std::size_t>(std::size_t(cfg.val_scenes), scenes.size() - 1);
  for (std::size_t i = 0; i < scenes.size(); ++i)
    (i + nval < scenes.size() ? train : val).push_back(prepare_training_scene(scenes[i], cfg));
}

}  // namespace vortx
