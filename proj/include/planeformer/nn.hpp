#pragma once

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "planeformer/rng.hpp"

namespace pf {

using Mat = Eigen::MatrixXd;

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Named dense parameters with gradient and momentum slots. Layers hold integer
// handles; values are row-major on disk (see save_checkpoint).
class ParamStore {
 public:
  int add(const std::string& name, int rows, int cols);
  int add_xavier(const std::string& name, int rows, int cols, Rng& rng);
  int find(const std::string& name) const;  // -1 when absent

  Mat& value(int id) { return values_[id]; }
  const Mat& value(int id) const { return values_[id]; }
  Mat& grad(int id) { return grads_[id]; }
  const Mat& grad(int id) const { return grads_[id]; }
  Mat& momentum(int id) { return momentum_[id]; }
  const std::string& name(int id) const { return names_[id]; }

  int count() const { return static_cast<int>(values_.size()); }
  std::size_t coefficient_count() const;
  void zero_grad();

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_, grads_, momentum_;
};

// y = x W + b for row-vector batches.
struct Linear {
  int w = -1, b = -1;
  int d_in = 0, d_out = 0;

  static Linear create(ParamStore& ps, const std::string& prefix, int d_in,
                       int d_out, Rng& rng);
  Mat forward(const ParamStore& ps, const Mat& x) const;
  // x is the forward input; accumulates parameter grads, returns dx.
  Mat backward(ParamStore& ps, const Mat& x, const Mat& dy) const;
};

struct LayerNorm {
  int gamma = -1, beta = -1;
  int d = 0;
  static constexpr double kEps = 1e-5;

  static LayerNorm create(ParamStore& ps, const std::string& prefix, int d);
  struct Cache {
    Mat xhat;
    Eigen::VectorXd inv_std;
  };
  Mat forward(const ParamStore& ps, const Mat& x, Cache& cache) const;
  Mat backward(ParamStore& ps, const Cache& cache, const Mat& dy) const;
};

// Inverted dropout; identity when !train or p == 0.
struct Dropout {
  double p = 0.0;
  struct Cache {
    Mat mask;
    bool active = false;
  };
  Mat forward(const Mat& x, bool train, Rng* rng, Cache& cache) const;
  Mat backward(const Cache& cache, const Mat& dy) const;
};

// Scaled dot-product self-attention, one head, learned Q/K/V/O projections.
struct Attention {
  Linear q, k, v, o;
  int d = 0;

  static Attention create(ParamStore& ps, const std::string& prefix, int d, Rng& rng);
  struct Cache {
    Mat x, qm, km, vm, attn, ctx;
  };
  Mat forward(const ParamStore& ps, const Mat& x, Cache& cache) const;
  Mat backward(ParamStore& ps, const Cache& cache, const Mat& dy) const;
};

// Post-norm encoder block: x1 = LN(x + drop(attn(x))), y = LN(x1 + drop(ffn(x1))).
struct EncoderLayer {
  Attention attn;
  Linear ffn1, ffn2;
  LayerNorm norm1, norm2;
  Dropout drop;

  static EncoderLayer create(ParamStore& ps, const std::string& prefix, int d,
                             int d_ffn, double dropout_p, Rng& rng);
  struct Cache {
    Attention::Cache attn;
    Dropout::Cache drop1, drop2;
    LayerNorm::Cache norm1, norm2;
    Mat x1, ffn_pre;
  };
  Mat forward(const ParamStore& ps, const Mat& x, bool train, Rng* rng,
              Cache& cache) const;
  Mat backward(ParamStore& ps, const Cache& cache, const Mat& dy) const;
};

struct EncoderConfig {
  int d_model = 899;
  int n_layers = 5;
  int n_heads = 1;
  int d_ffn = 2048;
  double dropout_p = 0.1;
};

struct Encoder {
  std::vector<EncoderLayer> layers;
  EncoderConfig cfg;

  // Parameters are named "layer{i}.{submodule}.{W|b}".
  static Encoder create(ParamStore& ps, const EncoderConfig& cfg, Rng& rng);
  struct Cache {
    std::vector<EncoderLayer::Cache> layers;
  };
  Mat forward(const ParamStore& ps, const Mat& x, bool train, Rng* rng,
              Cache& cache) const;
  Mat backward(ParamStore& ps, const Cache& cache, const Mat& dy) const;
};

// Four hidden layers, each halving the width, ReLU between; linear output.
struct MlpHeadConfig {
  int d_in = 0;
  int d_out = 0;
  std::vector<int> hidden() const {
    return {d_in / 2, d_in / 4, d_in / 8, d_in / 16};
  }
};

struct MlpHead {
  std::vector<Linear> fcs;  // 4 hidden + 1 output

  static MlpHead create(ParamStore& ps, const std::string& prefix,
                        const MlpHeadConfig& cfg, Rng& rng);
  struct Cache {
    std::vector<Mat> inputs;  // input to each fc
    std::vector<Mat> pres;    // hidden pre-activations
  };
  Mat forward(const ParamStore& ps, const Mat& x, Cache& cache) const;
  Mat backward(ParamStore& ps, const Cache& cache, const Mat& dy) const;
};

struct OptimizerConfig {
  double peak_lr = 1e-2;
  double floor_lr = 1e-5;
  double start_frac = 0.1;   // lr at position 0 as a fraction of peak
  double warmup_frac = 0.3;  // schedule position of the peak
  double momentum = 0.9;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
};

// One-cycle cosine: start_frac*peak -> peak at warmup_frac -> floor at 1.
double one_cycle_lr(const OptimizerConfig& cfg, double pos);

// v = momentum*v + g; p -= lr(pos)*v. Throws TrainingError naming the first
// parameter with a non-finite gradient.
void optimizer_step(ParamStore& ps, const OptimizerConfig& cfg, double pos);

struct GradCheckReport {
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;
};

// Central finite differences against analytic gradients for every coordinate
// (random subsample above max_coords). loss_and_grad must zero + fill the
// store's gradients and return the loss; loss_only must only evaluate it.
// Coordinates where fd(eps) and fd(eps/2) disagree are skipped as nonsmooth
// (ReLU/L1 kinks); the skip test never consults the analytic gradient, so a
// broken backward still surfaces.
GradCheckReport grad_check(ParamStore& ps,
                           const std::function<double()>& loss_and_grad,
                           const std::function<double()>& loss_only, double eps,
                           Rng& rng, std::size_t max_coords = 10000);

// Checkpoint = <dir>/manifest.json + <dir>/params.bin. Each parameter is a
// flat row-major little-endian float64 array; the manifest records name,
// shape, and byte offset per parameter plus caller-supplied fields.
void save_checkpoint(const std::string& dir, const ParamStore& ps,
                     const nlohmann::json& extra_manifest);
nlohmann::json read_checkpoint_manifest(const std::string& dir);
// Fills an already-built store; names and shapes must match exactly.
void load_checkpoint_params(const std::string& dir, ParamStore& ps);

}  // namespace pf
