#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "thzsim/autodiff.hpp"
#include "thzsim/channel.hpp"
#include "thzsim/linkmodel.hpp"
#include "thzsim/scenario.hpp"
#include "thzsim/solvers.hpp"
#include "thzsim/topology.hpp"

namespace thz {

// ----- graph ----------------------------------------------------------------

/// Feature layout capacities. Zero means "use the topology's own count";
/// larger values pad with zero slots so one model can read topologies with
/// fewer vehicles.
struct FeatureSlots {
  int spv = 0;
  int comm = 0;
  int sense = 0;
};

struct GraphConfig {
  double corridor = 3.5;            // m, perpendicular distance for the e counts
  double gain_ref_distance = 100.0;  // m, gain features are ln(1 + g / g(ref))
  FeatureSlots slots;
};

/// Nodes are SPVs [0,U), comm vehicles [U,U+M), sense vehicles [U+M,V).
struct VehicleGraph {
  int num_spv = 0, num_comm = 0, num_sense = 0;
  std::vector<std::vector<int>> adj;
  /// Raw per-pair quantities, V x V and V x (M+N).
  std::vector<double> gain;       // activity * LoS / (absorption loss * free-space loss), 0 on the diagonal
  std::vector<double> corridor_count;
  /// Node features, num_nodes() x feature_dim, row-major: e block then g block.
  std::vector<double> features;
  int feature_dim = 0;

  int num_nodes() const { return num_spv + num_comm + num_sense; }
  int num_requests() const { return num_comm + num_sense; }
  std::size_t num_edges() const;
};

VehicleGraph build_graph(const Topology& topo, const ChannelConfig& cfg, const GraphConfig& gc = {});

/// Number of SPVs (other than the endpoints) within `corridor` of segment
/// (a, b) whose projection falls on the segment.
int corridor_count(const Topology& topo, Point2D a, Point2D b, int skip_spv_a, int skip_spv_b, double corridor);

inline constexpr int kSentinel = -1;

/// Sampling tree rooted at a node: hops[k] has sizes[k] entries and entry j
/// was drawn from the adjacency of hops[k-1][j % sizes[k-1]] (the root for
/// k = 0). Nodes without neighbors, and children of sentinels, are kSentinel.
struct NeighborSample {
  int root = 0;
  std::vector<std::vector<int>> hops;
};

NeighborSample sample_neighbors(const VehicleGraph& g, int u, const std::vector<int>& sizes, Rng& rng);

// ----- model ----------------------------------------------------------------

enum class NodeAgg { SageMean, SageSum, SageMax, SageMlp, Gcn, Gat, GatCos, Gin };
enum class LayerAgg { Concat, Max, Att };
inline constexpr int kNumNodeAgg = 8;
inline constexpr int kNumLayerAgg = 3;
inline constexpr int kZooVersion = 1;

std::string_view node_agg_name(NodeAgg a);
std::string_view layer_agg_name(LayerAgg a);
NodeAgg node_agg_from_name(std::string_view s);
LayerAgg layer_agg_from_name(std::string_view s);

struct Architecture {
  std::vector<NodeAgg> hops;  // one per hop
  LayerAgg layer = LayerAgg::Concat;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

std::string to_string(const Architecture& a);

struct ModelConfig {
  int hops = 3;
  int embed = 64;                          // per-hop output width
  int branch = 21;                          // per-hop width of the layer aggregation output
  std::array<int, 3> hidden = {32, 64, 64};
  int sample_size = 10;
  GraphConfig graph;
  std::uint64_t seed = 1;

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& mc);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// One topology turned into graph form with its per-hop neighbor tables.
struct PreparedGraph {
  std::uint64_t topology_id = 0;
  VehicleGraph graph;
  /// tables[k][v * S + s]: s-th sample of node v used at hop k.
  std::vector<std::vector<int>> tables;
  /// U x (M+N+1) targets when labeled.
  std::vector<double> labels;
};

PreparedGraph prepare_graph(const Topology& topo, const ChannelConfig& cfg, const ModelConfig& mc,
                            const LabeledTopology* labels = nullptr);

/// Several prepared graphs stacked into one block-diagonal batch.
struct GraphBatch {
  int num_nodes = 0;
  int feature_dim = 0;
  int S = 0;
  int num_graphs = 0;
  std::vector<double> features;
  std::vector<std::vector<int>> tables;
  /// Self plus samples, per node: (S+1) entries.
  std::vector<std::vector<int>> att_idx;
  std::vector<std::vector<std::uint8_t>> att_mask;
  std::vector<double> gcn_self;
  std::vector<std::vector<double>> gcn_nb;
  std::vector<int> spv_rows;
  std::vector<double> labels;
  bool labeled = false;
};

GraphBatch make_batch(const std::vector<const PreparedGraph*>& graphs);

class DynGnnModel {
 public:
  DynGnnModel() = default;
  /// Initializes all weights and uniform architecture logits.
  DynGnnModel(const ModelConfig& mc, int feature_dim, int num_classes);

  const ModelConfig& config() const { return mc_; }
  int feature_dim() const { return feature_dim_; }
  int num_classes() const { return num_classes_; }
  int h4_width() const { return mc_.branch * mc_.hops; }

  ad::ParameterSet& weights() { return w_; }
  const ad::ParameterSet& weights() const { return w_; }
  ad::ParameterSet& arch_params() { return arch_; }
  const ad::ParameterSet& arch_params() const { return arch_; }
  /// Concatenated logits, length K*A1 + A2.
  std::vector<double> arch_weights() const;
  void set_arch_weights(const std::vector<double>& t);

  /// When set, forward uses only the chosen aggregators.
  const std::optional<Architecture>& fixed_architecture() const { return fixed_; }
  void set_fixed_architecture(std::optional<Architecture> a) { fixed_ = std::move(a); }

  struct Output {
    ad::Var logits;  // spv rows x classes
    ad::Var h4;      // spv rows x h4_width
  };
  Output forward(ad::Tape& tape, const GraphBatch& b) const;

  /// One pure node aggregator at `hop` (1-based) applied to all batch nodes.
  ad::Var node_aggregate_var(ad::Tape& tape, const GraphBatch& b, int hop, NodeAgg kind, ad::Var H) const;
  /// One pure layer aggregator over the per-hop outputs.
  ad::Var layer_aggregate_var(ad::Tape& tape, LayerAgg kind, const std::vector<ad::Var>& hs) const;

  /// Re-initializes hidden layers V-VII and the output layer for a new class
  /// count and freezes the aggregation layers.
  void reset_head(int num_classes, std::uint64_t seed);
  void set_body_trainable(bool trainable);

  nlohmann::json metadata() const;
  void save(const std::filesystem::path& path) const;
  static DynGnnModel load(const std::filesystem::path& path);

 private:
  void init_body(Rng& rng);
  void init_head(Rng& rng);
  ad::Var p(ad::Tape& tape, const std::string& name) const;

  ModelConfig mc_;
  int feature_dim_ = 0;
  int num_classes_ = 0;
  mutable ad::ParameterSet w_;
  mutable ad::ParameterSet arch_;
  std::optional<Architecture> fixed_;
};

/// Argmax per hop block and for the layer block; ties go to the lowest kind.
Architecture discretize_architecture(const std::vector<double>& arch_w, int hops);

/// Node aggregation of one node from explicit vectors (reference form).
std::vector<double> node_aggregate(NodeAgg kind, const DynGnnModel& model, int hop, const std::vector<double>& own,
                                   const std::vector<std::vector<double>>& neighbors);

double batch_loss(const DynGnnModel& model, const GraphBatch& b);

struct TrainConfig {
  int search_epochs = 30;
  int finetune_epochs = 300;
  int batch_size = 20;
  double weight_lr = 0.05;    // weight step during search
  double arch_lr = 0.01;      // architecture step
  double finetune_lr = 0.03;  // fine-tuning step
  double finetune_tol = 1e-4;
  int finetune_window = 20;
  double grad_clip = 0.0;  // max L2 norm of a weight gradient, 0 disables
  bool early_stop = true;
  bool search_architecture = true;  // false keeps the architecture weights frozen
  std::uint64_t seed = 1;
};

nlohmann::json to_json(const TrainConfig& tc);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TrainHistory {
  std::vector<double> search_train_loss;
  std::vector<double> search_val_loss;
  std::vector<double> finetune_loss;
  int finetune_stop_epoch = 0;
};

using EpochCallback = std::function<void(const char* phase, int epoch, double loss)>;

/// Alternating single-step-unrolled updates of the architecture weights (on val) and the model weights (on train).
TrainHistory train_bilevel(DynGnnModel& model, const std::vector<PreparedGraph>& train,
                           const std::vector<PreparedGraph>& val, const TrainConfig& tc,
                           const EpochCallback& cb = nullptr);
/// w <- w - finetune_lr * grad of the validation loss with the discretized architecture.
std::vector<double> finetune_w(DynGnnModel& model, const std::vector<PreparedGraph>& val, const TrainConfig& tc,
                               int* stop_epoch = nullptr, const EpochCallback& cb = nullptr);
/// Full pipeline: search, discretize, fine-tune.
TrainHistory train_model(DynGnnModel& model, const std::vector<PreparedGraph>& train,
                         const std::vector<PreparedGraph>& val, const TrainConfig& tc,
                         const EpochCallback& cb = nullptr);

/// Sigmoid scores, U x (M+N+1).
std::vector<double> predict_scores(const DynGnnModel& model, const PreparedGraph& g);
/// Each request column goes to the SPV with the highest score (lowest index on ties).
Assignment assignment_from_scores(const std::vector<double>& scores, int num_spv, int num_comm, int num_sense);
Assignment infer_assignment(const DynGnnModel& model, const Topology& topo, const ChannelConfig& cfg);

/// Rows: topology_id, spv_index, label class, h4 components.
void export_embeddings(const DynGnnModel& model, const std::vector<PreparedGraph>& graphs, const std::filesystem::path& path);

}  // namespace thz
