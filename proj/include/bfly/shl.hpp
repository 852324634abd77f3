#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>

#include "bfly/tensor.hpp"

namespace bfly {

// Single-hidden-layer benchmark: input(1024) -> first layer (swappable
// method) -> ReLU -> dense(10). The first layer is one of: baseline (dense),
// butterfly, pixelfly, lowrank, circulant, fastfood.

inline constexpr index_t kShlInputDim = 1024;
inline constexpr index_t kShlHiddenDim = 1024;
inline constexpr index_t kShlClasses = 10;
inline constexpr index_t kBaselineShlParams = 1059850;

// ---------------------------------------------------------------------------
// Config and data
// ---------------------------------------------------------------------------

struct TrainConfig {
  float learning_rate = 0.001f;
  float momentum = 0.9f;
  int batch_size = 50;
  double validation_fraction = 0.15;
  int epochs = 30;
  std::uint64_t seed = 1;
};

// Rows are samples. After carve_validation the training matrix is seeded-
// shuffled and rows [val_begin, rows) form the validation split.
struct Dataset {
  Matrix<float> train_x;
  std::vector<int> train_y;
  index_t val_begin = -1;  // -1: no validation carved yet
  Matrix<float> test_x;
  std::vector<int> test_y;

  index_t train_count() const { return val_begin < 0 ? train_x.rows : val_begin; }
  index_t val_count() const { return val_begin < 0 ? 0 : train_x.rows - val_begin; }
};

// Reads the binary batch files (3073-byte records: label byte then 32x32 R, G,
// B planes) from dir: data_batch_1..5.bin into train (present files only, at
// least one required) and test_batch.bin into test. Pixels are converted to
// grayscale by channel mean and scaled to [0, 1], giving 1024 features.
Dataset load_cifar10(const std::string& dir);

// Class-conditional Gaussian blobs in [0,1]^1024, linearly separable by
// construction; labels cycle through the classes. n_test extra samples share
// the class means and land in the test split.
Dataset synthetic_dataset(index_t n_samples, int n_classes, Rng& rng, index_t n_test = 0);

// Seeded in-place shuffle of the training rows; the last `fraction` of them
// becomes the validation split.
void carve_validation(Dataset& ds, double fraction, Rng& rng);

// ---------------------------------------------------------------------------
// Loss and optimizer
// ---------------------------------------------------------------------------

// Mean over the batch of -log softmax(logits)[label], computed with
// max-subtraction. dlogits = (softmax - onehot) / batch.
template <typename T>
double cross_entropy_loss(const Matrix<T>& logits, std::span<const int> labels,
                          Matrix<T>* dlogits) {
  if (static_cast<index_t>(labels.size()) != logits.rows)
    throw std::invalid_argument("cross_entropy_loss: label count mismatch");
  if (dlogits) *dlogits = Matrix<T>(logits.rows, logits.cols);
  double total = 0.0;
  const double inv_batch = 1.0 / static_cast<double>(logits.rows);
  for (index_t s = 0; s < logits.rows; ++s) {
    const auto row = logits.row(s);
    T mx = row[0];
    for (const T v : row) mx = std::max(mx, v);
    double denom = 0.0;
    for (const T v : row) denom += std::exp(static_cast<double>(v - mx));
    const int label = labels[static_cast<std::size_t>(s)];
    if (label < 0 || label >= logits.cols)
      throw std::invalid_argument("cross_entropy_loss: label out of range");
    const double log_denom = std::log(denom);
    total += log_denom - static_cast<double>(row[static_cast<std::size_t>(label)] - mx);
    if (dlogits) {
      auto drow = dlogits->row(s);
      for (index_t j = 0; j < logits.cols; ++j) {
        const double p = std::exp(static_cast<double>(row[static_cast<std::size_t>(j)] - mx)) / denom;
        drow[static_cast<std::size_t>(j)] =
            static_cast<T>((p - (j == label ? 1.0 : 0.0)) * inv_batch);
      }
    }
  }
  return total * inv_batch;
}

// Classical momentum: v <- mu * v + g; w <- w - lr * v.
template <typename T>
void sgd_momentum_step(std::span<T> w, std::span<const T> g, std::span<T> v, T lr, T mu) {
  if (w.size() != g.size() || w.size() != v.size())
    throw std::invalid_argument("sgd_momentum_step: shape mismatch");
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = mu * v[i] + g[i];
    w[i] -= lr * v[i];
  }
}

// ---------------------------------------------------------------------------
// Swappable first layer
// ---------------------------------------------------------------------------

// One parameter array with its gradient and momentum buffers; blocks are
// visited in a fixed declaration order (the checkpoint payload order).
struct ParamBlock {
  const char* name;
  std::span<float> w;
  std::span<float> g;
  std::span<float> v;
};

class FirstLayer {
 public:
  virtual ~FirstLayer() = default;
  virtual std::string method() const = 0;
  virtual index_t in_dim() const = 0;
  virtual index_t out_dim() const = 0;
  virtual index_t param_count() const = 0;  // learnable scalars, bias included
  virtual Matrix<float> forward(const Matrix<float>& x) = 0;
  virtual Matrix<float> backward(const Matrix<float>& upstream) = 0;
  virtual void for_each_param(const std::function<void(ParamBlock)>& fn) = 0;
  // key/value lines needed to rebuild the layer shape (not its weights)
  virtual void write_config(std::ostream& os) const;
};

struct LayerOptions {
  index_t in = kShlInputDim;
  index_t out = kShlHiddenDim;
  index_t rank = -1;   // lowrank/pixelfly; -1 = method default (4 / 32)
  index_t block = 64;  // pixelfly block size
  int levels = -1;     // pixelfly bands; -1 = all
};

const std::vector<std::string>& shl_method_names();

// method is one of shl_method_names(); throws with the valid list otherwise.
std::unique_ptr<FirstLayer> make_first_layer(const std::string& method, const LayerOptions& opts,
                                             Rng& rng);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class ShlModel {
 public:
  ShlModel(std::unique_ptr<FirstLayer> layer1, std::unique_ptr<FirstLayer> layer2);

  static ShlModel make(const std::string& method, const LayerOptions& opts, Rng& rng);

  Matrix<float> forward(const Matrix<float>& x);
  // takes dL/dlogits, propagates through layer2, ReLU, layer1
  Matrix<float> backward(const Matrix<float>& dlogits);
  void sgd_step(float lr, float momentum);

  FirstLayer& layer1() { return *layer1_; }
  FirstLayer& layer2() { return *layer2_; }
  const FirstLayer& layer1() const { return *layer1_; }
  const FirstLayer& layer2() const { return *layer2_; }
  std::string method() const { return layer1_->method(); }

  double accuracy(const Matrix<float>& x, std::span<const int> labels, index_t row_begin = 0,
                  index_t row_end = -1);

  // wall time spent inside layer-1 forward/backward since the last call
  double take_layer1_ms() {
    const double v = layer1_ms_;
    layer1_ms_ = 0.0;
    return v;
  }

 private:
  std::unique_ptr<FirstLayer> layer1_;
  std::unique_ptr<FirstLayer> layer2_;
  Matrix<float> hidden_pre_;  // pre-ReLU activations cached by forward
  double layer1_ms_ = 0.0;
};

struct ParamCountReport {
  std::string method;
  index_t layer1 = 0;
  index_t layer2 = 0;
  index_t total = 0;
  double compression = 0.0;  // 1 - total / baseline
};

ParamCountReport count_params(const ShlModel& model);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double layer1_ms = 0.0;  // forward + backward time of layer 1 only
  double cum_s = 0.0;      // wall time since training start
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double val_acc = 0.0;    // after the last epoch (or of the initial model)
  double test_acc = -1.0;  // -1 when the dataset has no test split
  double total_s = 0.0;
};

// Carves the validation split if not present, then runs SGD with momentum for
// config.epochs epochs. Deterministic for a fixed seed and thread count.
// Throws on NaN loss, naming the epoch.
TrainResult train_shl(ShlModel& model, Dataset& ds, const TrainConfig& config);

// Newline-delimited per-epoch records:
// epoch,train_loss,val_acc,test_acc,layer1_time_ms,cumulative_time_s
// with test_acc filled on the final epoch only. include_timing=false blanks
// the two wall-clock columns (they are not reproducible across runs).
std::string metrics_log(const TrainResult& result, bool include_timing = true);

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epoch = 0;
  TrainConfig config;
  std::vector<EpochRecord> history;
  double test_acc = -1.0;
};

// Versioned text header (method, shapes, layer config, seed, history) followed
// by the raw little-endian f32 parameter payload in declaration order.
void save_checkpoint(const ShlModel& model, const CheckpointMeta& meta, const std::string& path);

struct LoadedCheckpoint {
  ShlModel model;
  CheckpointMeta meta;
};

// Refuses unknown format versions; truncated or malformed files throw without
// producing a partial model.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace bfly
