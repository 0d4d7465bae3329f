#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "agcm/nn.hpp"
#include "agcm/tensor.hpp"

namespace agcm {

/// Configuration of one adaptive graph convolution module.
struct AgcmConfig {
  std::int64_t prototypes = 8;       // node count K
  std::int64_t edgeconv_layers = 3;  // stacked graph layers
  std::int64_t knn = 2;              // neighbors per node
  std::int64_t channels = 0;         // feature width C, bound at placement
  std::int64_t edge_hidden = 16;     // hidden width of the edge function
  std::int64_t heads = 2;            // attention heads for the kernel weight
  bool cosine_correlation = false;   // dot product by default
  bool dynamic_graph = false;        // rebuild the graph before every layer

  void validate() const;
};

/// Prototype features [channels x prototypes], tagged with their pipeline
/// stage so the refinement steps cannot be applied out of order.
struct PrototypeSet {
  enum class Stage { Raw, Reweighted, Refined };
  Tensor values;
  Stage stage = Stage::Raw;
};

/// Spatial attention [prototypes x pixels]; each row is a weighted-average
/// pooling kernel summing to 1.
struct AttentionMap {
  Tensor values;
};

/// Gram matrix of prototype embeddings [prototypes x prototypes]; symmetric,
/// with squared embedding norms on the diagonal.
struct AffinityMatrix {
  Tensor values;
};

/// Directed k-nearest-neighbor structure over prototype columns. No
/// self-loops; neighbor lists are index-ordered only through the distance
/// tie-break (lower index wins).
struct KnnGraph {
  std::int64_t nodes = 0;
  std::int64_t k = 0;
  std::vector<std::int64_t> neighbors;  // nodes * k, row-major per node

  std::int64_t neighbor(std::int64_t node, std::int64_t slot) const {
    return neighbors[static_cast<std::size_t>(node * k + slot)];
  }
};

void declare_agcm(ParameterStore& store, const std::string& prefix, const AgcmConfig& cfg);

/// Learnable parameters one module adds, in closed form.
std::int64_t agcm_param_count(const AgcmConfig& cfg);

struct PrototypeResult {
  PrototypeSet prototypes;  // raw stage
  AttentionMap attention;
};

/// Pools input features [C x H x W] into K prototype columns through
/// softmax-normalized spatial attention maps; fully differentiable.
PrototypeResult generate_prototypes(const ParameterStore& store, const std::string& prefix,
                                    const AgcmConfig& cfg, const Tensor& features);

/// Euclidean nearest neighbors between prototype columns, excluding self;
/// distance ties break toward the lower index.
KnnGraph knn_graph(const PrototypeSet& prototypes, std::int64_t k);

/// One graph layer: node i receives max-aggregated edge features
/// mlp([x_i ; x_j - x_i]) over its neighbors j.
Tensor edgeconv_layer(const ParameterStore& store, const std::string& prefix,
                      const Tensor& node_features, const KnnGraph& graph);

/// The stacked graph layers producing prototype embeddings. The graph is
/// built once from the raw prototypes unless cfg.dynamic_graph rebuilds it
/// from each layer's output.
Tensor embed_prototypes(const ParameterStore& store, const std::string& prefix,
                        const AgcmConfig& cfg, const PrototypeSet& prototypes,
                        const KnnGraph& graph);

/// Gram matrix of the embeddings: E^T E.
AffinityMatrix adjacency(const Tensor& embeddings);

/// Channel re-weighting vector from attention + pooling + mlp over the raw
/// prototype columns; invariant to column order.
Tensor kernel_weight(const ParameterStore& store, const std::string& prefix,
                     const AgcmConfig& cfg, const PrototypeSet& prototypes);

/// Scales every prototype column by the kernel weight.
PrototypeSet reweight(const PrototypeSet& prototypes, const Tensor& weight);

/// Convex recombination of the re-weighted prototypes: values * softmax of
/// the affinity normalized so each output column's weights sum to 1.
PrototypeSet refine(const PrototypeSet& reweighted, const AffinityMatrix& affinity);

/// Per-pixel similarity between refined prototypes and input features,
/// [K x H x W]. Dot product scaled by 1/C, or cosine when configured.
Tensor correlate(const PrototypeSet& refined, const Tensor& features, bool cosine = false);

/// Full module: prototype generation, graph refinement, correlation, and
/// channel concatenation. [C x H x W] -> [(C+K) x H x W].
Tensor agcm_forward(const ParameterStore& store, const std::string& prefix, const AgcmConfig& cfg,
                    const Tensor& features);

}  // namespace agcm
