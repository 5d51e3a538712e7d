#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "planeformer/nn.hpp"
#include "planeformer/synth.hpp"
#include "planeformer/tokens.hpp"

namespace pf {

struct ModelConfig {
  int d_app = 128;
  int grid_rows = 24;
  int grid_cols = 32;
  int n_layers = 5;
  int d_ffn = 2048;
  double dropout_p = 0.1;
  bool no_appearance = false;
  bool no_plane = false;
  bool no_mask = false;
  bool no_transformer = false;
  bool no_residual = false;

  // Full token width; the encoder and heads always run at this width.
  int d_model() const { return d_app + 3 + grid_rows * grid_cols; }
  // Width after dropping ablated feature segments.
  int d_input() const {
    return (no_appearance ? 0 : d_app) + (no_plane ? 0 : 3) +
           (no_mask ? 0 : grid_rows * grid_cols);
  }
  bool has_projection() const { return d_input() != d_model(); }
  TokenConfig token_config() const { return {grid_rows, grid_cols}; }

  static ModelConfig paper();  // 899-wide, 5 layers
  static ModelConfig desk();   // 83-wide, 2 layers
  static ModelConfig smoke();  // 32-wide, 2 layers
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct PlaneFormerOutputs {
  Mat pi;  // M1 x M2, post-sigmoid
  double c = 0.0;  // post-sigmoid
  Eigen::Vector4d delta_q = Eigen::Vector4d(1, 0, 0, 0);
  Vec3 delta_t = Vec3::Zero();
  bool has_residual = false;  // false leaves delta at the identity correction
  // Pre-sigmoid values, kept for the loss.
  Mat pi_logits;
  double c_logit = 0.0;
};

struct GroundTruthPair {
  Mat match;  // M1 x M2 binary partial permutation
  bool hyp_correct = false;
  Eigen::Vector4d residual_q = Eigen::Vector4d(1, 0, 0, 0);
  Vec3 residual_t = Vec3::Zero();
  int hyp_index = -1;  // codebook entry used to build the tokens
};

struct LossWeights {
  double w_pi = 1.0;
  double w_c = 1.0;
  double w_rot = 1.0;
  double lambda_t = 0.5;
};

struct LossComponents {
  double total = 0.0;
  double pi = 0.0;
  double c = 0.0;
  double rot = 0.0;
  double trans = 0.0;
};

// All ordered token pairs (a, b), row a*M + b, each the concatenation
// o_a | o_b | mu(image of a) | mu(image of b) with mu the per-image average
// token. The full M x M grid is built; consumers select sub-blocks.
struct PairwiseExpansion {
  Mat features;  // (M*M) x 4d
  int m = 0, m1 = 0, m2 = 0;
  int index(int a, int b) const { return a * m + b; }
};

PairwiseExpansion pairwise_expand(const Mat& tokens, int m1, int m2);
// Scatters pair-feature gradients back onto the tokens.
Mat pairwise_expand_backward(const PairwiseExpansion& pairs, const Mat& dfeatures);

class PlaneFormer {
 public:
  PlaneFormer(const ModelConfig& cfg, std::uint64_t seed);

  struct Trace {
    Mat input;      // ablation-selected token features
    Mat projected;  // after the ablation projection (or = input)
    Encoder::Cache enc;
    Mat encoded;
    PairwiseExpansion pairs;
    Mat cross;  // (M1*M2) x 4d cross-view block, row a*m2 + b
    MlpHead::Cache pi_cache, c_cache, rot_cache, trans_cache;
    int m1 = 0, m2 = 0;
    bool aux_heads_ran = false;  // pi/rot/trans evaluated
  };

  // `with_aux_heads = false` evaluates only the camera-correspondence head
  // (the other heads carry no loss on incorrect-hypothesis items).
  PlaneFormerOutputs forward(const TokenBatch& batch, bool train, Rng* rng,
                             Trace* trace = nullptr,
                             bool with_aux_heads = true) const;

  // Accumulates parameter gradients for upstream logit/residual gradients.
  void backward(const Trace& trace, const Mat& dpi_logits, double dc_logit,
                const Eigen::Vector4d& ddelta_q, const Vec3& ddelta_t);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }

 private:
  Mat select_features(const Mat& features) const;

  ModelConfig cfg_;
  ParamStore ps_;
  Linear proj_;
  Encoder encoder_;
  MlpHead head_pi_, head_c_, head_rot_, head_trans_;
};

LossComponents compute_loss(const PlaneFormerOutputs& out,
                            const GroundTruthPair& gt, const LossWeights& w);

// compute_loss plus gradient accumulation through the model.
LossComponents loss_and_backward(PlaneFormer& model,
                                 const PlaneFormer::Trace& trace,
                                 const PlaneFormerOutputs& out,
                                 const GroundTruthPair& gt,
                                 const LossWeights& w);

struct TrainingPair {
  TokenBatch batch;
  GroundTruthPair gt;
  const PairData* pair = nullptr;
};

// Even mix of correct hypotheses (nearest codebook entry to the true relative
// pose) and incorrect ones (uniform non-nearest entry), over a random ordered
// view pair of the episode.
TrainingPair make_training_pair(const Episode& episode,
                                const CameraCodebook& codebook,
                                const TokenConfig& grid, Rng& rng);

struct TrainConfig {
  ModelConfig model;
  OptimizerConfig optim;
  LossWeights weights;
  int iterations = 2000;
  int batch_size = 8;
  int eval_interval = 200;
  int checkpoint_interval = 500;
  int jobs = 1;
  std::uint64_t seed = 0;
  std::string out_dir;  // checkpoints + metrics log; empty = no files
};

struct EvalSnapshot {
  int iteration = 0;
  double val_loss = 0.0;
  double c_accuracy = 0.0;  // sigmoid(C) > 0.5 agreeing with hyp_correct
  double ipaa_mean = 0.0;   // thresholded-assignment agreement on val pairs
};

struct TrainResult {
  std::vector<double> loss_history;  // batch-mean total per iteration
  std::vector<EvalSnapshot> evals;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int iterations_run = 0;
  std::string final_checkpoint;
};

// Resumes from out_dir's latest checkpoint when one exists; a completed run is
// returned as-is. Aborts (retaining the last good checkpoint) on a non-finite
// loss.
TrainResult train(PlaneFormer& model, const std::vector<Episode>& train_set,
                  const std::vector<Episode>& val_set,
                  const CameraCodebook& codebook, const TrainConfig& cfg);

}  // namespace pf
