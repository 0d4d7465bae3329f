#include "agcm/agcm.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <mutex>
#include <set>
#include <utility>

#include "agcm/error.hpp"
#include "agcm/ops.hpp"

namespace agcm {

void AgcmConfig::validate() const {
  if (prototypes < 1) throw ConfigError("agcm: prototype count must be >= 1");
  if (edgeconv_layers < 1) throw ConfigError("agcm: edgeconv layer count must be >= 1");
  if (channels < 1) throw ConfigError("agcm: channel width must be >= 1");
  if (edge_hidden < 1) throw ConfigError("agcm: edge hidden width must be >= 1");
  if (knn < 1 || knn > prototypes - 1) {
    throw ConfigError("agcm: knn must satisfy 1 <= knn <= prototypes-1, got knn=" +
                      std::to_string(knn) + " with " + std::to_string(prototypes) + " prototypes");
  }
  MhaSpec{channels, heads}.validate();
}

namespace {

MlpSpec edge_mlp_spec(const AgcmConfig& cfg) {
  return MlpSpec{{2 * cfg.channels, cfg.edge_hidden, cfg.channels}};
}

MlpSpec kernel_mlp_spec(const AgcmConfig& cfg) {
  return MlpSpec{{cfg.channels, cfg.channels, cfg.channels}};
}

std::string edge_prefix(const std::string& prefix, std::int64_t layer) {
  return prefix + ".edge" + std::to_string(layer);
}

KnnGraph knn_graph_of(const Tensor& columns, std::int64_t k) {
  if (columns.rank() != 2) {
    throw ShapeError("knn_graph expects [channels x nodes], got " + shape_str(columns.shape()));
  }
  columns.ensure_finite("knn_graph input");
  const std::int64_t c = columns.dim(0), n = columns.dim(1);
  if (k < 1 || k > n - 1) {
    throw ConfigError("knn_graph: k must satisfy 1 <= k <= nodes-1, got k=" + std::to_string(k) +
                      " with " + std::to_string(n) + " nodes");
  }
  KnnGraph graph;
  graph.nodes = n;
  graph.k = k;
  graph.neighbors.resize(static_cast<std::size_t>(n * k));
  const auto& v = columns.data();
  std::vector<std::pair<double, std::int64_t>> order;
  order.reserve(static_cast<std::size_t>(n - 1));
  for (std::int64_t i = 0; i < n; ++i) {
    order.clear();
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double d2 = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double diff = v[ch * n + i] - v[ch * n + j];
        d2 += diff * diff;
      }
      order.emplace_back(d2, j);
    }
    // Lexicographic (distance, index): equidistant nodes resolve to the
    // lower index.
    std::sort(order.begin(), order.end());
    for (std::int64_t slot = 0; slot < k; ++slot) {
      graph.neighbors[static_cast<std::size_t>(i * k + slot)] = order[static_cast<std::size_t>(slot)].second;
    }
  }
  return graph;
}

}  // namespace

void declare_agcm(ParameterStore& store, const std::string& prefix, const AgcmConfig& cfg) {
  cfg.validate();
  declare_conv1x1(store, prefix + ".attn", cfg.prototypes, cfg.channels);
  for (std::int64_t l = 0; l < cfg.edgeconv_layers; ++l) {
    declare_mlp(store, edge_prefix(prefix, l), edge_mlp_spec(cfg));
  }
  declare_mha(store, prefix + ".mha", MhaSpec{cfg.channels, cfg.heads});
  declare_mlp(store, prefix + ".mlp", kernel_mlp_spec(cfg));
}

std::int64_t agcm_param_count(const AgcmConfig& cfg) {
  const std::int64_t c = cfg.channels, k = cfg.prototypes, h = cfg.edge_hidden;
  const std::int64_t attn = k * c + k;
  const std::int64_t edge = cfg.edgeconv_layers * (h * 2 * c + h + c * h + c);
  const std::int64_t mha = 4 * (c * c + c);
  const std::int64_t mlp = 2 * (c * c + c);
  return attn + edge + mha + mlp;
}

PrototypeResult generate_prototypes(const ParameterStore& store, const std::string& prefix,
                                    const AgcmConfig& cfg, const Tensor& features) {
  if (features.rank() != 3 || features.dim(0) != cfg.channels) {
    throw ConfigError("agcm '" + prefix + "' expects [" + std::to_string(cfg.channels) +
                      " x h x w] features, got " + shape_str(features.shape()));
  }
  const std::int64_t pixels = features.dim(1) * features.dim(2);
  if (pixels < cfg.prototypes) {
    static std::mutex mu;
    static std::set<std::string> warned;
    std::lock_guard<std::mutex> lock(mu);
    if (warned.insert(prefix).second) {
      std::cerr << "agcm-warning: '" << prefix << "' pools " << cfg.prototypes
                << " prototypes from only " << pixels << " pixels\n";
    }
  }
  Tensor logits = conv1x1_forward(store, prefix + ".attn", features);
  Tensor attention = softmax(reshape(logits, {cfg.prototypes, pixels}), 1);
  Tensor flat = reshape(features, {cfg.channels, pixels});
  Tensor pooled = matmul(flat, transpose(attention));
  return PrototypeResult{PrototypeSet{pooled, PrototypeSet::Stage::Raw}, AttentionMap{attention}};
}

KnnGraph knn_graph(const PrototypeSet& prototypes, std::int64_t k) {
  return knn_graph_of(prototypes.values, k);
}

Tensor edgeconv_layer(const ParameterStore& store, const std::string& prefix,
                      const Tensor& node_features, const KnnGraph& graph) {
  if (node_features.rank() != 2) {
    throw ShapeError("edgeconv expects [channels x nodes], got " + shape_str(node_features.shape()));
  }
  if (node_features.dim(1) != graph.nodes) {
    throw ShapeError("edgeconv node count " + std::to_string(node_features.dim(1)) +
                     " does not match graph over " + std::to_string(graph.nodes) + " nodes");
  }
  const std::int64_t c_in = node_features.dim(0);
  Tensor w0 = store.get(prefix + ".0.weight");
  Tensor w1 = store.get(prefix + ".1.weight");
  if (w0.dim(1) != 2 * c_in) {
    throw ShapeError("edgeconv '" + prefix + "' expects " + std::to_string(w0.dim(1) / 2) +
                     " input channels, got " + std::to_string(c_in));
  }
  const MlpSpec spec{{w0.dim(1), w0.dim(0), w1.dim(0)}};

  // Edge list in node-major order: node i's k edges occupy one contiguous
  // group, which the grouped max below aggregates.
  std::vector<std::int64_t> src, dst;
  src.reserve(static_cast<std::size_t>(graph.nodes * graph.k));
  dst.reserve(src.capacity());
  for (std::int64_t i = 0; i < graph.nodes; ++i) {
    for (std::int64_t slot = 0; slot < graph.k; ++slot) {
      src.push_back(i);
      dst.push_back(graph.neighbor(i, slot));
    }
  }
  Tensor center = gather_cols(node_features, src);
  Tensor neighbor = gather_cols(node_features, dst);
  Tensor offset = sub(neighbor, center);
  Tensor edge_in = transpose(concat({center, offset}, 0));       // edges x 2c
  Tensor edge_out = transpose(mlp_forward(store, prefix, spec, edge_in));
  return colgroup_max(edge_out, graph.k);
}

Tensor embed_prototypes(const ParameterStore& store, const std::string& prefix,
                        const AgcmConfig& cfg, const PrototypeSet& prototypes,
                        const KnnGraph& graph) {
  if (prototypes.stage != PrototypeSet::Stage::Raw) {
    throw UsageError("embed_prototypes expects raw-stage prototypes");
  }
  Tensor x = prototypes.values;
  KnnGraph g = graph;
  for (std::int64_t l = 0; l < cfg.edgeconv_layers; ++l) {
    if (cfg.dynamic_graph && l > 0) g = knn_graph_of(x, cfg.knn);
    x = edgeconv_layer(store, edge_prefix(prefix, l), x, g);
  }
  return x;
}

AffinityMatrix adjacency(const Tensor& embeddings) {
  if (embeddings.rank() != 2) {
    throw ShapeError("adjacency expects [channels x nodes], got " + shape_str(embeddings.shape()));
  }
  embeddings.ensure_finite("adjacency input");
  return AffinityMatrix{matmul(transpose(embeddings), embeddings)};
}

Tensor kernel_weight(const ParameterStore& store, const std::string& prefix,
                     const AgcmConfig& cfg, const PrototypeSet& prototypes) {
  if (prototypes.stage != PrototypeSet::Stage::Raw) {
    throw UsageError("kernel_weight expects raw-stage prototypes");
  }
  if (prototypes.values.dim(0) != cfg.channels) {
    throw ShapeError("kernel_weight channel mismatch: " + shape_str(prototypes.values.shape()) +
                     " vs configured " + std::to_string(cfg.channels));
  }
  Tensor tokens = transpose(prototypes.values);  // nodes x channels
  Tensor mixed = mha_forward(store, prefix + ".mha", MhaSpec{cfg.channels, cfg.heads}, tokens);
  Tensor pooled = mean(mixed, 0);
  return mlp_forward(store, prefix + ".mlp", kernel_mlp_spec(cfg), pooled);
}

PrototypeSet reweight(const PrototypeSet& prototypes, const Tensor& weight) {
  if (prototypes.stage != PrototypeSet::Stage::Raw) {
    throw UsageError("reweight expects raw-stage prototypes");
  }
  if (weight.rank() != 1 || weight.dim(0) != prototypes.values.dim(0)) {
    throw ShapeError("reweight expects a length-" + std::to_string(prototypes.values.dim(0)) +
                     " kernel weight, got " + shape_str(weight.shape()));
  }
  return PrototypeSet{hadamard(prototypes.values, weight), PrototypeSet::Stage::Reweighted};
}

PrototypeSet refine(const PrototypeSet& reweighted, const AffinityMatrix& affinity) {
  if (reweighted.stage != PrototypeSet::Stage::Reweighted) {
    throw UsageError("refine expects reweighted-stage prototypes");
  }
  const Tensor& a = affinity.values;
  const std::int64_t nodes = reweighted.values.dim(1);
  if (a.rank() != 2 || a.dim(0) != nodes || a.dim(1) != nodes) {
    throw ShapeError("refine affinity must be [" + std::to_string(nodes) + " x " +
                     std::to_string(nodes) + "], got " + shape_str(a.shape()));
  }
  // Normalize down each column so every output node mixes the re-weighted
  // prototypes with weights summing to 1.
  Tensor allocation = softmax(a, 0);
  return PrototypeSet{matmul(reweighted.values, allocation), PrototypeSet::Stage::Refined};
}

Tensor correlate(const PrototypeSet& refined, const Tensor& features, bool cosine) {
  if (refined.stage != PrototypeSet::Stage::Refined) {
    throw UsageError("correlate expects refined-stage prototypes");
  }
  if (features.rank() != 3 || features.dim(0) != refined.values.dim(0)) {
    throw ShapeError("correlate channel mismatch: prototypes " + shape_str(refined.values.shape()) +
                     " vs features " + shape_str(features.shape()));
  }
  const std::int64_t channels = features.dim(0);
  const std::int64_t h = features.dim(1), w = features.dim(2);
  const std::int64_t nodes = refined.values.dim(1);
  Tensor flat = reshape(features, {channels, h * w});
  Tensor dots = matmul(transpose(refined.values), flat);  // nodes x pixels
  Tensor scores;
  if (cosine) {
    Tensor proto_norm = sqrt(sum(hadamard(refined.values, refined.values), 0));
    Tensor pixel_norm = sqrt(sum(hadamard(flat, flat), 0));
    Tensor denom = matmul(reshape(proto_norm, {nodes, 1}), reshape(pixel_norm, {1, h * w}));
    scores = hadamard(dots, reciprocal(add_scalar(denom, 1e-12)));
  } else {
    scores = scale(dots, 1.0 / static_cast<double>(channels));
  }
  return reshape(scores, {nodes, h, w});
}

Tensor agcm_forward(const ParameterStore& store, const std::string& prefix, const AgcmConfig& cfg,
                    const Tensor& features) {
  cfg.validate();
  PrototypeResult gen = generate_prototypes(store, prefix, cfg, features);
  KnnGraph graph = knn_graph(gen.prototypes, cfg.knn);
  Tensor embeddings = embed_prototypes(store, prefix, cfg, gen.prototypes, graph);
  AffinityMatrix affinity = adjacency(embeddings);
  Tensor weight = kernel_weight(store, prefix, cfg, gen.prototypes);
  PrototypeSet refined = refine(reweight(gen.prototypes, weight), affinity);
  Tensor scores = correlate(refined, features, cfg.cosine_correlation);
  return concat({features, scores}, 0);
}

}  // namespace agcm
