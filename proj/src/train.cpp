#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "planeformer/inference.hpp"
#include "planeformer/metrics.hpp"
#include "planeformer/model.hpp"
#include "planeformer/parallel.hpp"

namespace fs = std::filesystem;

namespace pf {

namespace {

// Every random draw is keyed off (seed, stream, iteration, item), so a resumed
// run replays the exact stream of an uninterrupted one and the item order is
// independent of the worker count.
constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kValStream = 2;

Rng item_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t iteration,
             std::uint64_t item) {
  return Rng(mix_seed(mix_seed(mix_seed(seed, stream), iteration), item));
}

std::string checkpoint_name(int iteration) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "checkpoint_%06d", iteration);
  return buf;
}

Json optimizer_to_json(const OptimizerConfig& o) {
  return {{"peak_lr", o.peak_lr},       {"floor_lr", o.floor_lr},
          {"start_frac", o.start_frac}, {"warmup_frac", o.warmup_frac},
          {"momentum", o.momentum},     {"weight_decay", o.weight_decay},
          {"grad_clip", o.grad_clip}};
}

Json weights_to_json(const LossWeights& w) {
  return {{"w_pi", w.w_pi},
          {"w_c", w.w_c},
          {"w_rot", w.w_rot},
          {"lambda_t", w.lambda_t}};
}

struct RunState {
  std::vector<LossComponents> history;
  std::vector<EvalSnapshot> evals;
};

Json state_to_manifest(const PlaneFormer& model, const TrainConfig& cfg,
                       const RunState& st, int done, bool completed) {
  Json losses = Json::array();
  for (const LossComponents& c : st.history)
    losses.push_back({c.total, c.pi, c.c, c.rot, c.trans});
  Json evals = Json::array();
  for (const EvalSnapshot& e : st.evals)
    evals.push_back({{"iteration", e.iteration},
                     {"val_loss", e.val_loss},
                     {"c_accuracy", e.c_accuracy},
                     {"ipaa_mean", e.ipaa_mean}});
  return {{"model", model_config_to_json(model.config())},
          {"optimizer", optimizer_to_json(cfg.optim)},
          {"weights", weights_to_json(cfg.weights)},
          {"iterations", cfg.iterations},
          {"batch_size", cfg.batch_size},
          {"seed", cfg.seed},
          {"iteration", done},
          {"schedule_pos", static_cast<double>(done) / cfg.iterations},
          {"loss_history", std::move(losses)},
          {"evals", std::move(evals)},
          {"completed", completed}};
}

void state_from_manifest(const Json& m, RunState& st) {
  st.history.clear();
  for (const Json& row : m.at("loss_history")) {
    LossComponents c;
    c.total = row.at(0);
    c.pi = row.at(1);
    c.c = row.at(2);
    c.rot = row.at(3);
    c.trans = row.at(4);
    st.history.push_back(c);
  }
  st.evals.clear();
  for (const Json& e : m.at("evals")) {
    EvalSnapshot s;
    s.iteration = e.at("iteration");
    s.val_loss = e.at("val_loss");
    s.c_accuracy = e.at("c_accuracy");
    s.ipaa_mean = e.at("ipaa_mean");
    st.evals.push_back(s);
  }
}

// Rejects checkpoints written under a different recipe: resuming them would
// silently change the trajectory.
void check_manifest_compatible(const Json& m, const PlaneFormer& model,
                               const TrainConfig& cfg, const std::string& dir) {
  const bool ok = m.at("model") == model_config_to_json(model.config()) &&
                  m.at("optimizer") == optimizer_to_json(cfg.optim) &&
                  m.at("iterations") == cfg.iterations &&
                  m.at("batch_size") == cfg.batch_size &&
                  m.at("seed") == cfg.seed;
  if (!ok)
    throw TrainingError("checkpoint at " + dir +
                        " was written under a different training config");
}

// The momentum buffers ride along as a nested checkpoint so a resumed
// optimizer continues the exact velocity state.
void save_momentum(const std::string& dir, ParamStore& ps) {
  ParamStore ms;
  for (int i = 0; i < ps.count(); ++i) {
    const Mat& m = ps.momentum(i);
    const int id = ms.add(ps.name(i), static_cast<int>(m.rows()),
                          static_cast<int>(m.cols()));
    ms.value(id) = m;
  }
  save_checkpoint((fs::path(dir) / "momentum").string(), ms, Json::object());
}

void load_momentum(const std::string& dir, ParamStore& ps) {
  ParamStore ms;
  for (int i = 0; i < ps.count(); ++i) {
    const Mat& m = ps.momentum(i);
    ms.add(ps.name(i), static_cast<int>(m.rows()), static_cast<int>(m.cols()));
  }
  load_checkpoint_params((fs::path(dir) / "momentum").string(), ms);
  for (int i = 0; i < ps.count(); ++i) ps.momentum(i) = ms.value(i);
}

void write_logs(const fs::path& out, const RunState& st) {
  std::ofstream f(out / "loss.csv", std::ios::trunc);
  f.precision(17);
  f << "iteration,total,pi,c,rot,trans\n";
  for (std::size_t i = 0; i < st.history.size(); ++i) {
    const LossComponents& c = st.history[i];
    f << i << ',' << c.total << ',' << c.pi << ',' << c.c << ',' << c.rot
      << ',' << c.trans << "\n";
  }
  std::ofstream g(out / "evals.csv", std::ios::trunc);
  g.precision(17);
  g << "iteration,val_loss,c_accuracy,ipaa_mean\n";
  for (const EvalSnapshot& e : st.evals)
    g << e.iteration << ',' << e.val_loss << ',' << e.c_accuracy << ','
      << e.ipaa_mean << "\n";
}

void persist(const std::string& dir, PlaneFormer& model, const TrainConfig& cfg,
             const RunState& st, int done, bool completed) {
  save_checkpoint(dir, model.params(),
                  state_to_manifest(model, cfg, st, done, completed));
  save_momentum(dir, model.params());
}

EvalSnapshot run_validation(const PlaneFormer& model,
                            const std::vector<Episode>& val_set,
                            const CameraCodebook& codebook,
                            const TrainConfig& cfg, int iteration) {
  EvalSnapshot snap;
  snap.iteration = iteration;
  const TokenConfig grid = model.config().token_config();
  const std::size_t n = val_set.size();

  struct ItemEval {
    double loss = 0.0;
    bool c_correct = false;
    bool has_fraction = false;
    double fraction = 0.0;
  };
  std::vector<ItemEval> items(n);
  parallel_for(n, cfg.jobs, [&](std::size_t v) {
    Rng rng = item_rng(cfg.seed, kValStream, iteration, v);
    const TrainingPair tp =
        make_training_pair(val_set[v], codebook, grid, rng);
    const PlaneFormerOutputs out =
        model.forward(tp.batch, /*train=*/false, nullptr);
    items[v].loss = compute_loss(out, tp.gt, cfg.weights).total;
    items[v].c_correct = (out.c > 0.5) == tp.gt.hyp_correct;
    if (tp.gt.hyp_correct) {
      std::vector<std::pair<int, int>> pred, gt;
      for (const MatchEdge& e : match_planes(out.pi, 0.5))
        pred.push_back({e.j1, e.j2});
      for (Eigen::Index i = 0; i < tp.gt.match.rows(); ++i)
        for (Eigen::Index j = 0; j < tp.gt.match.cols(); ++j)
          if (tp.gt.match(i, j) > 0.5)
            gt.push_back({static_cast<int>(i), static_cast<int>(j)});
      items[v].has_fraction = true;
      items[v].fraction =
          ipaa(pred, gt, tp.batch.m1, tp.batch.m2);
    }
  });

  int correct = 0, with_fraction = 0;
  double loss_sum = 0.0, fraction_sum = 0.0;
  for (const ItemEval& e : items) {
    loss_sum += e.loss;
    correct += e.c_correct;
    if (e.has_fraction) {
      fraction_sum += e.fraction;
      ++with_fraction;
    }
  }
  snap.val_loss = loss_sum / n;
  snap.c_accuracy = static_cast<double>(correct) / n;
  snap.ipaa_mean = with_fraction == 0 ? 0.0 : fraction_sum / with_fraction;
  return snap;
}

}  // namespace

TrainResult train(PlaneFormer& model, const std::vector<Episode>& train_set,
                  const std::vector<Episode>& val_set,
                  const CameraCodebook& codebook, const TrainConfig& cfg) {
  if (train_set.empty())
    throw std::invalid_argument("train: training set is empty");
  if (cfg.iterations <= 0 || cfg.batch_size <= 0)
    throw std::invalid_argument("train: iterations and batch_size must be > 0");
  if (model_config_to_json(model.config()) != model_config_to_json(cfg.model))
    throw std::invalid_argument("train: model does not match the config");

  const bool keep_files = !cfg.out_dir.empty();
  const fs::path out(cfg.out_dir);
  RunState st;
  int start_iter = 0;

  if (keep_files) {
    fs::create_directories(out);
    // Resume point: the completed run if present, else the newest checkpoint.
    const fs::path final_dir = out / "final";
    std::string resume_dir;
    int resume_iter = -1;
    if (fs::exists(final_dir / "manifest.json")) {
      resume_dir = final_dir.string();
      resume_iter = cfg.iterations;
    } else {
      for (const auto& entry : fs::directory_iterator(out)) {
        if (!entry.is_directory()) continue;
        const std::string name = entry.path().filename().string();
        if (name.rfind("checkpoint_", 0) != 0) continue;
        if (!fs::exists(entry.path() / "manifest.json")) continue;
        const Json m = read_checkpoint_manifest(entry.path().string());
        const int it = m.at("iteration");
        if (it > resume_iter) {
          resume_iter = it;
          resume_dir = entry.path().string();
        }
      }
    }
    if (resume_iter >= 0) {
      const Json m = read_checkpoint_manifest(resume_dir);
      check_manifest_compatible(m, model, cfg, resume_dir);
      load_checkpoint_params(resume_dir, model.params());
      load_momentum(resume_dir, model.params());
      state_from_manifest(m, st);
      start_iter = resume_iter;
      if (m.at("completed").get<bool>()) {
        TrainResult res;
        for (const LossComponents& c : st.history)
          res.loss_history.push_back(c.total);
        res.evals = st.evals;
        res.initial_loss = st.history.front().total;
        res.final_loss = st.history.back().total;
        res.iterations_run = 0;
        res.final_checkpoint = resume_dir;
        return res;
      }
    }
  }

  ParamStore& ps = model.params();
  const TokenConfig grid = model.config().token_config();
  const int batch = cfg.batch_size;

  struct Item {
    PlaneFormer::Trace trace;
    PlaneFormerOutputs out;
    GroundTruthPair gt;
    LossComponents loss;
  };

  for (int it = start_iter; it < cfg.iterations; ++it) {
    std::vector<Item> items(batch);
    parallel_for(batch, cfg.jobs, [&](std::size_t k) {
      Item& item = items[k];
      Rng rng = item_rng(cfg.seed, kTrainStream, it, k);
      const Episode& ep = train_set[rng.uniform_index(train_set.size())];
      TrainingPair tp = make_training_pair(ep, codebook, grid, rng);
      item.gt = std::move(tp.gt);
      // Incorrect-hypothesis items only carry the camera-correspondence loss,
      // so the other heads are not evaluated for them.
      item.out = model.forward(tp.batch, /*train=*/true, &rng, &item.trace,
                               /*with_aux_heads=*/item.gt.hyp_correct);
      item.loss = compute_loss(item.out, item.gt, cfg.weights);
    });

    LossComponents mean;
    for (const Item& item : items) {
      mean.total += item.loss.total;
      mean.pi += item.loss.pi;
      mean.c += item.loss.c;
      mean.rot += item.loss.rot;
      mean.trans += item.loss.trans;
    }
    const double inv_b = 1.0 / batch;
    mean.total *= inv_b;
    mean.pi *= inv_b;
    mean.c *= inv_b;
    mean.rot *= inv_b;
    mean.trans *= inv_b;
    if (!std::isfinite(mean.total))
      throw TrainingError("non-finite loss at iteration " +
                          std::to_string(it) +
                          "; the last checkpoint is retained");

    // Backward runs in a fixed item order so the accumulated gradient is
    // byte-identical for every worker count.
    ps.zero_grad();
    for (Item& item : items)
      loss_and_backward(model, item.trace, item.out, item.gt, cfg.weights);
    for (int p = 0; p < ps.count(); ++p) ps.grad(p) *= inv_b;

    optimizer_step(ps, cfg.optim,
                   static_cast<double>(it) / cfg.iterations);
    st.history.push_back(mean);

    const int done = it + 1;
    if (cfg.eval_interval > 0 && done % cfg.eval_interval == 0 &&
        !val_set.empty())
      st.evals.push_back(run_validation(model, val_set, codebook, cfg, done));
    if (keep_files && cfg.checkpoint_interval > 0 &&
        done % cfg.checkpoint_interval == 0 && done < cfg.iterations) {
      persist((out / checkpoint_name(done)).string(), model, cfg, st, done,
              false);
      write_logs(out, st);
    }
  }

  TrainResult res;
  for (const LossComponents& c : st.history)
    res.loss_history.push_back(c.total);
  res.evals = st.evals;
  res.initial_loss = st.history.front().total;
  res.final_loss = st.history.back().total;
  res.iterations_run = cfg.iterations - start_iter;
  if (keep_files) {
    const std::string final_dir = (out / "final").string();
    persist(final_dir, model, cfg, st, cfg.iterations, true);
    write_logs(out, st);
    res.final_checkpoint = final_dir;
  }
  return res;
}

}  // namespace pf
