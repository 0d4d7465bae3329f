#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "agcm/agcm.hpp"
#include "agcm/error.hpp"
#include "agcm/ops.hpp"
#include "test_util.hpp"

using namespace agcm;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

Tensor sumsq(const Tensor& t) { return sum(hadamard(t, t)); }

AgcmConfig small_config(std::int64_t channels, std::int64_t prototypes, std::int64_t layers,
                        std::int64_t knn) {
  AgcmConfig cfg;
  cfg.channels = channels;
  cfg.prototypes = prototypes;
  cfg.edgeconv_layers = layers;
  cfg.knn = knn;
  cfg.edge_hidden = 6;
  cfg.heads = channels % 2 == 0 ? 2 : 1;
  return cfg;
}

struct Module {
  ParameterStore store;
  AgcmConfig cfg;
  std::string prefix = "m";
};

Module make_module(const AgcmConfig& cfg, std::uint64_t seed) {
  Module m;
  m.cfg = cfg;
  declare_agcm(m.store, m.prefix, cfg);
  init_params(m.store, InitScheme::XavierUniform, seed);
  return m;
}

PrototypeSet raw_set(Tensor values) { return PrototypeSet{std::move(values), PrototypeSet::Stage::Raw}; }

/// Brute-force neighbor lists from a full pairwise distance table.
std::vector<std::vector<std::int64_t>> brute_force_knn(const Tensor& cols, std::int64_t k) {
  const std::int64_t c = cols.dim(0), n = cols.dim(1);
  std::vector<std::vector<std::int64_t>> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::int64_t>> d;
    for (std::int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double acc = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double diff = cols.at(ch, i) - cols.at(ch, j);
        acc += diff * diff;
      }
      d.emplace_back(acc, j);
    }
    std::sort(d.begin(), d.end());
    for (std::int64_t s = 0; s < k; ++s) out[static_cast<std::size_t>(i)].push_back(d[static_cast<std::size_t>(s)].second);
  }
  return out;
}

Tensor permute_cols(const Tensor& t, const std::vector<std::int64_t>& perm) {
  // out column perm[j] = in column j  (relabeling node j as perm[j])
  Tensor out(t.shape());
  const std::int64_t rows = t.dim(0), cols = t.dim(1);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t j = 0; j < cols; ++j) {
      out.mutable_data()[static_cast<std::size_t>(r * cols + perm[static_cast<std::size_t>(j)])] =
          t.at(r, j);
    }
  }
  return out;
}

bool distinct_pairwise_distances(const Tensor& cols, double min_gap) {
  const std::int64_t c = cols.dim(0), n = cols.dim(1);
  std::vector<double> dists;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double diff = cols.at(ch, i) - cols.at(ch, j);
        acc += diff * diff;
      }
      dists.push_back(acc);
    }
  }
  std::sort(dists.begin(), dists.end());
  for (std::size_t i = 1; i < dists.size(); ++i) {
    if (dists[i] - dists[i - 1] < min_gap) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("generate_prototypes pools through the attention maps") {
  SUBCASE("constant logits give uniform attention and the global mean") {
    Module m = make_module(small_config(3, 4, 1, 2), 1);
    // Zeroing the pointwise weights leaves only the per-map bias, so every
    // logit map is constant over pixels.
    Tensor w = m.store.get("m.attn.weight");
    std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
    Rng rng(2);
    Tensor features = random_tensor({3, 4, 5}, rng);
    auto res = generate_prototypes(m.store, m.prefix, m.cfg, features);

    const std::int64_t pixels = 20;
    for (std::int64_t k = 0; k < 4; ++k) {
      for (std::int64_t p = 0; p < pixels; ++p) {
        CHECK(res.attention.values.at(k, p) == doctest::Approx(1.0 / pixels).epsilon(1e-12));
      }
    }
    for (std::int64_t c = 0; c < 3; ++c) {
      double mean_c = 0.0;
      for (std::int64_t p = 0; p < pixels; ++p) mean_c += features.data()[static_cast<std::size_t>(c * pixels + p)];
      mean_c /= static_cast<double>(pixels);
      for (std::int64_t k = 0; k < 4; ++k) {
        CHECK(res.prototypes.values.at(c, k) == doctest::Approx(mean_c).epsilon(1e-12));
      }
    }
  }
  SUBCASE("single prototype with constant logits is global average pooling") {
    AgcmConfig cfg = small_config(2, 1, 1, 1);
    ParameterStore store;
    declare_conv1x1(store, "g.attn", 1, 2);
    Rng rng(3);
    Tensor features = random_tensor({2, 3, 3}, rng);
    auto res = generate_prototypes(store, "g", cfg, features);
    for (std::int64_t c = 0; c < 2; ++c) {
      double mean_c = 0.0;
      for (std::int64_t p = 0; p < 9; ++p) mean_c += features.data()[static_cast<std::size_t>(c * 9 + p)];
      CHECK(res.prototypes.values.at(c, 0) == doctest::Approx(mean_c / 9.0).epsilon(1e-12));
    }
  }
  SUBCASE("matrix pooling matches the explicit weighted-average loop") {
    Module m = make_module(small_config(4, 3, 1, 2), 4);
    Rng rng(5);
    Tensor features = random_tensor({4, 8, 8}, rng);
    auto res = generate_prototypes(m.store, m.prefix, m.cfg, features);
    const std::int64_t pixels = 64;
    for (std::int64_t c = 0; c < 4; ++c) {
      for (std::int64_t k = 0; k < 3; ++k) {
        double acc = 0.0;
        for (std::int64_t p = 0; p < pixels; ++p) {
          acc += res.attention.values.at(k, p) * features.data()[static_cast<std::size_t>(c * pixels + p)];
        }
        CHECK(std::abs(res.prototypes.values.at(c, k) - acc) < 1e-12);
      }
    }
  }
  SUBCASE("attention rows always sum to one") {
    Module m = make_module(small_config(3, 5, 1, 2), 6);
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
      Tensor features = random_tensor({3, 6, 6}, rng, -3.0, 3.0);
      auto res = generate_prototypes(m.store, m.prefix, m.cfg, features);
      for (std::int64_t k = 0; k < 5; ++k) {
        double s = 0.0;
        for (std::int64_t p = 0; p < 36; ++p) s += res.attention.values.at(k, p);
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
    }
  }
}

TEST_CASE("knn_graph structure") {
  SUBCASE("k = nodes-1 is fully connected") {
    Rng rng(8);
    Tensor cols = random_tensor({3, 5}, rng);
    KnnGraph g = knn_graph(raw_set(cols), 4);
    for (std::int64_t i = 0; i < 5; ++i) {
      std::set<std::int64_t> nb;
      for (std::int64_t s = 0; s < 4; ++s) {
        const auto j = g.neighbor(i, s);
        CHECK(j != i);
        nb.insert(j);
      }
      CHECK(nb.size() == 4);
    }
  }
  SUBCASE("line of prototypes at 0, 1, 10") {
    Tensor cols(Shape{1, 3}, std::vector<double>{0.0, 1.0, 10.0});
    KnnGraph g = knn_graph(raw_set(cols), 1);
    CHECK(g.neighbor(0, 0) == 1);
    CHECK(g.neighbor(1, 0) == 0);
    CHECK(g.neighbor(2, 0) == 1);
  }
  SUBCASE("equidistant duplicates break toward the lower index") {
    // Columns 2 and 5 are identical; node 7 sits equidistant from both.
    Tensor cols = Tensor::zeros({2, 8});
    auto set_col = [&](std::int64_t j, double x, double y) {
      cols.mutable_data()[static_cast<std::size_t>(0 * 8 + j)] = x;
      cols.mutable_data()[static_cast<std::size_t>(1 * 8 + j)] = y;
    };
    set_col(0, 40, 0);
    set_col(1, 50, 0);
    set_col(2, 1, 0);
    set_col(3, 60, 0);
    set_col(4, 70, 0);
    set_col(5, 1, 0);
    set_col(6, 80, 0);
    set_col(7, 0, 0);
    KnnGraph g = knn_graph(raw_set(cols), 1);
    CHECK(g.neighbor(7, 0) == 2);
  }
  SUBCASE("matches brute force on 100 random instances") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
      const std::int64_t n = rng.uniform_int(3, 7);
      const std::int64_t c = rng.uniform_int(1, 5);
      const std::int64_t k = rng.uniform_int(1, n - 1);
      Tensor cols = random_tensor({c, n}, rng);
      KnnGraph g = knn_graph(raw_set(cols), k);
      auto expected = brute_force_knn(cols, k);
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t s = 0; s < k; ++s) {
          CHECK(g.neighbor(i, s) == expected[static_cast<std::size_t>(i)][static_cast<std::size_t>(s)]);
        }
      }
    }
  }
  SUBCASE("out-of-range k rejected") {
    Rng rng(10);
    Tensor cols = random_tensor({2, 4}, rng);
    CHECK_THROWS_AS(knn_graph(raw_set(cols), 4), ConfigError);
    CHECK_THROWS_AS(knn_graph(raw_set(cols), 0), ConfigError);
  }
}

TEST_CASE("edgeconv layer") {
  SUBCASE("identical columns stay identical") {
    Module m = make_module(small_config(3, 4, 1, 2), 11);
    Tensor cols(Shape{3, 4});
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t j = 0; j < 4; ++j) {
        cols.mutable_data()[static_cast<std::size_t>(c * 4 + j)] = 0.3 * static_cast<double>(c) - 0.1;
      }
    }
    KnnGraph g;
    g.nodes = 4;
    g.k = 2;
    g.neighbors = {1, 2, 0, 2, 0, 1, 0, 1};
    Tensor out = edgeconv_layer(m.store, "m.edge0", cols, g);
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t j = 1; j < 4; ++j) CHECK(out.at(c, j) == out.at(c, 0));
    }
  }
  SUBCASE("hand-set edge function matches the per-edge loop") {
    AgcmConfig cfg = small_config(2, 3, 1, 1);
    cfg.edge_hidden = 2;
    ParameterStore store;
    declare_mlp(store, "e", MlpSpec{{4, 2, 2}});
    store.get("e.0.weight").mutable_data() = {0.2, -0.4, 0.5, 0.1, -0.3, 0.7, 0.6, -0.2};
    store.get("e.0.bias").mutable_data() = {0.05, -0.05};
    store.get("e.1.weight").mutable_data() = {1.0, -0.5, 0.25, 0.75};
    store.get("e.1.bias").mutable_data() = {0.0, 0.1};

    Tensor cols(Shape{2, 3}, std::vector<double>{0.5, -0.2, 0.9, 1.1, 0.4, -0.6});
    KnnGraph g = knn_graph(raw_set(cols), 1);
    Tensor out = edgeconv_layer(store, "e", cols, g);

    const auto& w0 = store.get("e.0.weight").data();
    const auto& b0 = store.get("e.0.bias").data();
    const auto& w1 = store.get("e.1.weight").data();
    const auto& b1 = store.get("e.1.bias").data();
    for (std::int64_t i = 0; i < 3; ++i) {
      const std::int64_t j = g.neighbor(i, 0);
      const double in[4] = {cols.at(0, i), cols.at(1, i), cols.at(0, j) - cols.at(0, i),
                            cols.at(1, j) - cols.at(1, i)};
      double hidden[2];
      for (int o = 0; o < 2; ++o) {
        double acc = b0[static_cast<std::size_t>(o)];
        for (int t = 0; t < 4; ++t) acc += w0[static_cast<std::size_t>(o * 4 + t)] * in[t];
        hidden[o] = std::max(acc, 0.0);
      }
      for (int o = 0; o < 2; ++o) {
        double acc = b1[static_cast<std::size_t>(o)];
        for (int t = 0; t < 2; ++t) acc += w1[static_cast<std::size_t>(o * 2 + t)] * hidden[t];
        CHECK(std::abs(out.at(o, i) - acc) < 1e-12);
      }
    }
  }
  SUBCASE("node count mismatch rejected") {
    Module m = make_module(small_config(3, 4, 1, 2), 12);
    KnnGraph g;
    g.nodes = 5;
    g.k = 1;
    g.neighbors = {1, 0, 0, 0, 0};
    Rng rng(13);
    CHECK_THROWS_AS(edgeconv_layer(m.store, "m.edge0", random_tensor({3, 4}, rng), g), ShapeError);
  }
}

TEST_CASE("embed_prototypes composes the graph layers") {
  SUBCASE("single layer reduces to one edgeconv call") {
    Module m = make_module(small_config(3, 4, 1, 2), 14);
    Rng rng(15);
    PrototypeSet p = raw_set(random_tensor({3, 4}, rng));
    KnnGraph g = knn_graph(p, 2);
    Tensor via_embed = embed_prototypes(m.store, m.prefix, m.cfg, p, g);
    Tensor direct = edgeconv_layer(m.store, "m.edge0", p.values, g);
    CHECK(max_abs_diff(via_embed, direct) == 0.0);
  }
  SUBCASE("three layers match stepwise application") {
    Module m = make_module(small_config(3, 5, 3, 2), 16);
    Rng rng(17);
    PrototypeSet p = raw_set(random_tensor({3, 5}, rng));
    KnnGraph g = knn_graph(p, 2);
    Tensor via_embed = embed_prototypes(m.store, m.prefix, m.cfg, p, g);
    Tensor x = p.values;
    for (int l = 0; l < 3; ++l) x = edgeconv_layer(m.store, "m.edge" + std::to_string(l), x, g);
    CHECK(max_abs_diff(via_embed, x) < 1e-12);
  }
}

TEST_CASE("adjacency is the embedding gram matrix") {
  SUBCASE("orthonormal columns give the identity") {
    Tensor e(Shape{3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor a = adjacency(e).values;
    for (std::int64_t i = 0; i < 3; ++i) {
      for (std::int64_t j = 0; j < 3; ++j) CHECK(a.at(i, j) == (i == j ? 1.0 : 0.0));
    }
  }
  SUBCASE("diagonal holds squared norms; pairwise dots match the loop") {
    Rng rng(18);
    Tensor e = random_tensor({3, 4}, rng);
    Tensor a = adjacency(e).values;
    for (std::int64_t i = 0; i < 4; ++i) {
      for (std::int64_t j = 0; j < 4; ++j) {
        double dot = 0.0;
        for (std::int64_t c = 0; c < 3; ++c) dot += e.at(c, i) * e.at(c, j);
        CHECK(std::abs(a.at(i, j) - dot) < 1e-12);
        CHECK(std::abs(a.at(i, j) - a.at(j, i)) < 1e-9);
      }
      CHECK(a.at(i, i) >= 0.0);
    }
  }
}

TEST_CASE("kernel_weight") {
  SUBCASE("shape is the channel width regardless of node count") {
    for (std::int64_t nodes : {2, 5, 9}) {
      Module m = make_module(small_config(4, nodes < 3 ? 2 : nodes, 1, 1), 19);
      Rng rng(20);
      Tensor w = kernel_weight(m.store, m.prefix, m.cfg, raw_set(random_tensor({4, nodes}, rng)));
      CHECK(w.shape() == Shape{4});
    }
  }
  SUBCASE("invariant under column permutations") {
    Module m = make_module(small_config(4, 6, 1, 2), 21);
    Rng rng(22);
    for (int trial = 0; trial < 10; ++trial) {
      Tensor p = random_tensor({4, 6}, rng);
      std::vector<std::int64_t> perm(6);
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(perm);
      Tensor w1 = kernel_weight(m.store, m.prefix, m.cfg, raw_set(p));
      Tensor w2 = kernel_weight(m.store, m.prefix, m.cfg, raw_set(permute_cols(p, perm)));
      CHECK(max_abs_diff(w1, w2) < 1e-12);
    }
  }
  SUBCASE("hand-set parameters match direct evaluation") {
    AgcmConfig cfg = small_config(2, 2, 1, 1);
    cfg.heads = 1;
    ParameterStore store;
    declare_mha(store, "k.mha", MhaSpec{2, 1});
    declare_mlp(store, "k.mlp", MlpSpec{{2, 2, 2}});
    Rng rng(23);
    for (const auto& path : store.paths()) {
      Tensor t = store.get(path);
      for (auto& v : t.mutable_data()) v = rng.uniform(-0.8, 0.8);
    }
    Tensor p(Shape{2, 2}, std::vector<double>{0.7, -0.4, 0.2, 1.1});
    Tensor w = kernel_weight(store, "k", cfg, raw_set(p));

    // Direct evaluation: attention over the two tokens, mean pool, two
    // affine layers with relu between.
    auto affine2 = [&](const std::string& prefix, const std::array<double, 2>& in) {
      const auto& wt = store.get(prefix + ".weight").data();
      const auto& b = store.get(prefix + ".bias").data();
      return std::array<double, 2>{wt[0] * in[0] + wt[1] * in[1] + b[0],
                                   wt[2] * in[0] + wt[3] * in[1] + b[1]};
    };
    std::array<std::array<double, 2>, 2> tok{{{p.at(0, 0), p.at(1, 0)}, {p.at(0, 1), p.at(1, 1)}}};
    std::array<std::array<double, 2>, 2> q, k, v;
    for (int i = 0; i < 2; ++i) {
      q[i] = affine2("k.mha.q", tok[i]);
      k[i] = affine2("k.mha.k", tok[i]);
      v[i] = affine2("k.mha.v", tok[i]);
    }
    const double inv_s = 1.0 / std::sqrt(2.0);
    std::array<std::array<double, 2>, 2> mixed;
    for (int i = 0; i < 2; ++i) {
      const double z0 = inv_s * (q[i][0] * k[0][0] + q[i][1] * k[0][1]);
      const double z1 = inv_s * (q[i][0] * k[1][0] + q[i][1] * k[1][1]);
      const double mx = std::max(z0, z1);
      const double e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);
      const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
      std::array<double, 2> mv{a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]};
      mixed[i] = affine2("k.mha.out", mv);
    }
    std::array<double, 2> pooled{(mixed[0][0] + mixed[1][0]) / 2.0, (mixed[0][1] + mixed[1][1]) / 2.0};
    auto h = affine2("k.mlp.0", pooled);
    h = {std::max(h[0], 0.0), std::max(h[1], 0.0)};
    const auto expected = affine2("k.mlp.1", h);
    CHECK(std::abs(w.at(0) - expected[0]) < 1e-12);
    CHECK(std::abs(w.at(1) - expected[1]) < 1e-12);
  }
}

TEST_CASE("reweight scales columns by the kernel weight") {
  Rng rng(24);
  Tensor p = random_tensor({3, 2}, rng);
  CHECK(max_abs_diff(reweight(raw_set(p), Tensor::ones({3})).values, p) == 0.0);
  const Tensor zeroed = reweight(raw_set(p), Tensor::zeros({3})).values;
  for (double v : zeroed.data()) CHECK(v == 0.0);

  Tensor w = random_tensor({3}, rng);
  PrototypeSet out = reweight(raw_set(p), w);
  CHECK(out.stage == PrototypeSet::Stage::Reweighted);
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t j = 0; j < 2; ++j) {
      CHECK(std::abs(out.values.at(c, j) - p.at(c, j) * w.at(c)) < 1e-15);
    }
  }
  CHECK_THROWS_AS(reweight(raw_set(p), Tensor::ones({4})), ShapeError);
  CHECK_THROWS_AS(reweight(out, w), UsageError);
}

TEST_CASE("refine mixes columns through the column-stochastic allocation") {
  SUBCASE("constant affinity averages the columns") {
    Rng rng(25);
    Tensor p = random_tensor({2, 3}, rng);
    PrototypeSet rew{p, PrototypeSet::Stage::Reweighted};
    PrototypeSet out = refine(rew, AffinityMatrix{Tensor::full({3, 3}, 2.5)});
    for (std::int64_t c = 0; c < 2; ++c) {
      const double m = (p.at(c, 0) + p.at(c, 1) + p.at(c, 2)) / 3.0;
      for (std::int64_t j = 0; j < 3; ++j) CHECK(out.values.at(c, j) == doctest::Approx(m).epsilon(1e-12));
    }
  }
  SUBCASE("single node is the identity") {
    Tensor p(Shape{3, 1}, std::vector<double>{0.1, -2.0, 5.0});
    PrototypeSet rew{p, PrototypeSet::Stage::Reweighted};
    PrototypeSet out = refine(rew, AffinityMatrix{Tensor::full({1, 1}, -3.0)});
    CHECK(max_abs_diff(out.values, p) < 1e-15);
  }
  SUBCASE("random instance matches the convex-combination loop") {
    Rng rng(26);
    Tensor p = random_tensor({2, 3}, rng);
    Tensor a = random_tensor({3, 3}, rng, -2.0, 2.0);
    PrototypeSet out = refine(PrototypeSet{p, PrototypeSet::Stage::Reweighted}, AffinityMatrix{a});

    for (std::int64_t j = 0; j < 3; ++j) {
      // Column j of the allocation: softmax over a[., j].
      double mx = -1e300;
      for (std::int64_t i = 0; i < 3; ++i) mx = std::max(mx, a.at(i, j));
      double denom = 0.0;
      std::array<double, 3> e{};
      for (std::int64_t i = 0; i < 3; ++i) {
        e[static_cast<std::size_t>(i)] = std::exp(a.at(i, j) - mx);
        denom += e[static_cast<std::size_t>(i)];
      }
      for (std::int64_t c = 0; c < 2; ++c) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < 3; ++i) acc += p.at(c, i) * e[static_cast<std::size_t>(i)] / denom;
        CHECK(std::abs(out.values.at(c, j) - acc) < 1e-12);
      }
    }
  }
  SUBCASE("allocation columns sum to one") {
    Rng rng(27);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor a = random_tensor({4, 4}, rng, -3.0, 3.0);
      Tensor alloc = softmax(a, 0);
      for (std::int64_t j = 0; j < 4; ++j) {
        double s = 0.0;
        for (std::int64_t i = 0; i < 4; ++i) s += alloc.at(i, j);
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("correlate scores prototypes against pixels") {
  SUBCASE("zero prototypes give zero scores") {
    Rng rng(28);
    Tensor features = random_tensor({3, 2, 2}, rng);
    PrototypeSet zero{Tensor::zeros({3, 2}), PrototypeSet::Stage::Refined};
    const Tensor scores = correlate(zero, features);
    for (double v : scores.data()) CHECK(v == 0.0);
  }
  SUBCASE("matching pixel scores its squared norm over the width") {
    Tensor p(Shape{2, 1}, std::vector<double>{0.6, -0.8});
    Tensor features(Shape{2, 1, 1}, std::vector<double>{0.6, -0.8});
    const Tensor scores = correlate(PrototypeSet{p, PrototypeSet::Stage::Refined}, features);
    CHECK(scores.at(0, 0, 0) == doctest::Approx((0.36 + 0.64) / 2.0).epsilon(1e-12));
  }
  SUBCASE("random instance matches the per-pixel dot loop") {
    Rng rng(29);
    Tensor p = random_tensor({4, 2}, rng);
    Tensor features = random_tensor({4, 3, 3}, rng);
    const Tensor scores = correlate(PrototypeSet{p, PrototypeSet::Stage::Refined}, features);
    for (std::int64_t k = 0; k < 2; ++k) {
      for (std::int64_t y = 0; y < 3; ++y) {
        for (std::int64_t x = 0; x < 3; ++x) {
          double dot = 0.0;
          for (std::int64_t c = 0; c < 4; ++c) dot += p.at(c, k) * features.at(c, y, x);
          CHECK(std::abs(scores.at(k, y, x) - dot / 4.0) < 1e-12);
        }
      }
    }
  }
  SUBCASE("cosine variant is bounded by one") {
    Rng rng(30);
    Tensor p = random_tensor({4, 3}, rng);
    Tensor features = random_tensor({4, 3, 3}, rng);
    const Tensor scores =
        correlate(PrototypeSet{p, PrototypeSet::Stage::Refined}, features, /*cosine=*/true);
    for (double v : scores.data()) CHECK(std::abs(v) <= 1.0 + 1e-9);
  }
}

TEST_CASE("agcm_forward output contract") {
  Module m = make_module(small_config(4, 3, 2, 2), 31);
  Rng rng(32);
  Tensor features = random_tensor({4, 6, 6}, rng);
  Tensor out = agcm_forward(m.store, m.prefix, m.cfg, features);
  REQUIRE(out.shape() == Shape{7, 6, 6});
  // Input channels pass through untouched.
  for (std::int64_t c = 0; c < 4; ++c) {
    for (std::int64_t p = 0; p < 36; ++p) {
      CHECK(out.data()[static_cast<std::size_t>(c * 36 + p)] ==
            features.data()[static_cast<std::size_t>(c * 36 + p)]);
    }
  }
}

TEST_CASE("permuting attention parameter rows permutes score channels") {
  AgcmConfig cfg = small_config(4, 3, 2, 2);
  Module m = make_module(cfg, 33);
  Rng rng(34);
  Tensor features = random_tensor({4, 5, 5}, rng);
  Tensor base = agcm_forward(m.store, m.prefix, m.cfg, features);

  const std::vector<std::int64_t> perm{2, 0, 1};  // row j -> row perm[j]
  Module m2 = make_module(cfg, 33);
  Tensor w = m.store.get("m.attn.weight");
  Tensor b = m.store.get("m.attn.bias");
  Tensor w2 = m2.store.get("m.attn.weight");
  Tensor b2 = m2.store.get("m.attn.bias");
  for (std::int64_t j = 0; j < 3; ++j) {
    for (std::int64_t c = 0; c < 4; ++c) {
      w2.mutable_data()[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)] * 4 + c)] = w.at(j, c);
    }
    b2.mutable_data()[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])] = b.at(j);
  }
  Tensor permuted = agcm_forward(m2.store, m2.prefix, m2.cfg, features);

  for (std::int64_t c = 0; c < 4; ++c) {
    for (std::int64_t p = 0; p < 25; ++p) {
      CHECK(permuted.data()[static_cast<std::size_t>(c * 25 + p)] ==
            base.data()[static_cast<std::size_t>(c * 25 + p)]);
    }
  }
  for (std::int64_t j = 0; j < 3; ++j) {
    for (std::int64_t p = 0; p < 25; ++p) {
      const double expected = base.data()[static_cast<std::size_t>((4 + j) * 25 + p)];
      const double got =
          permuted.data()[static_cast<std::size_t>((4 + perm[static_cast<std::size_t>(j)]) * 25 + p)];
      CHECK(std::abs(got - expected) < 1e-9);
    }
  }
}

TEST_CASE("refinement stage is permutation equivariant") {
  // Node relabeling conjugates the affinity, permutes the refined columns
  // and score channels, and leaves the kernel weight unchanged.
  AgcmConfig cfg = small_config(3, 5, 2, 2);
  Module m = make_module(cfg, 35);
  Rng rng(36);
  int tested = 0;
  while (tested < 100) {
    Tensor p = random_tensor({3, 5}, rng);
    if (!distinct_pairwise_distances(p, 1e-6)) continue;
    ++tested;
    std::vector<std::int64_t> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tensor pp = permute_cols(p, perm);
    Tensor features = random_tensor({3, 4, 4}, rng);

    KnnGraph g = knn_graph(raw_set(p), cfg.knn);
    KnnGraph gp = knn_graph(raw_set(pp), cfg.knn);
    for (std::int64_t i = 0; i < 5; ++i) {
      for (std::int64_t s = 0; s < cfg.knn; ++s) {
        CHECK(gp.neighbor(perm[static_cast<std::size_t>(i)], s) ==
              perm[static_cast<std::size_t>(g.neighbor(i, s))]);
      }
    }

    Tensor a = adjacency(embed_prototypes(m.store, m.prefix, cfg, raw_set(p), g)).values;
    Tensor ap = adjacency(embed_prototypes(m.store, m.prefix, cfg, raw_set(pp), gp)).values;
    for (std::int64_t i = 0; i < 5; ++i) {
      for (std::int64_t j = 0; j < 5; ++j) {
        CHECK(std::abs(ap.at(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]) -
                       a.at(i, j)) < 1e-9);
      }
    }

    Tensor w = kernel_weight(m.store, m.prefix, cfg, raw_set(p));
    Tensor wp = kernel_weight(m.store, m.prefix, cfg, raw_set(pp));
    CHECK(max_abs_diff(w, wp) < 1e-9);

    Tensor refined = refine(reweight(raw_set(p), w), AffinityMatrix{a}).values;
    Tensor refinedp = refine(reweight(raw_set(pp), wp), AffinityMatrix{ap}).values;
    for (std::int64_t c = 0; c < 3; ++c) {
      for (std::int64_t j = 0; j < 5; ++j) {
        CHECK(std::abs(refinedp.at(c, perm[static_cast<std::size_t>(j)]) - refined.at(c, j)) < 1e-9);
      }
    }

    Tensor s = correlate(PrototypeSet{refined, PrototypeSet::Stage::Refined}, features);
    Tensor sp = correlate(PrototypeSet{refinedp, PrototypeSet::Stage::Refined}, features);
    for (std::int64_t j = 0; j < 5; ++j) {
      for (std::int64_t px = 0; px < 16; ++px) {
        CHECK(std::abs(sp.data()[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)] * 16 + px)] -
                       s.data()[static_cast<std::size_t>(j * 16 + px)]) < 1e-9);
      }
    }
  }
  CHECK(tested == 100);
}

TEST_CASE("full module gradient check across seeds") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    AgcmConfig cfg = small_config(4, 3, 2, 2);
    Module m = make_module(cfg, 400 + seed);
    Rng rng(500 + seed);
    Tensor features = random_tensor({4, 6, 6}, rng);
    auto f = [&](const Tensor& x) { return sumsq(agcm_forward(m.store, m.prefix, m.cfg, x)); };
    auto report = grad_check(f, features);
    CHECK_MESSAGE(report.max_rel_err < 1e-4, "seed " << seed << " err " << report.max_rel_err);
  }
}

TEST_CASE("pooling equivalence over 100 random instances") {
  Rng rng(37);
  int done = 0;
  while (done < 100) {
    const std::int64_t c = rng.uniform_int(1, 8);
    const std::int64_t k = rng.uniform_int(2, 6);
    const std::int64_t h = rng.uniform_int(2, 8);
    const std::int64_t w = rng.uniform_int(2, 8);
    if (h * w > 64) continue;
    ++done;
    AgcmConfig cfg = small_config(c, k, 1, 1);
    cfg.heads = 1;
    ParameterStore store;
    declare_conv1x1(store, "p.attn", k, c);
    init_params(store, InitScheme::XavierUniform, 38 + static_cast<std::uint64_t>(done));
    Tensor features = random_tensor({c, h, w}, rng);
    auto res = generate_prototypes(store, "p", cfg, features);
    const std::int64_t pixels = h * w;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t kk = 0; kk < k; ++kk) {
        double acc = 0.0;
        for (std::int64_t p = 0; p < pixels; ++p) {
          acc += res.attention.values.at(kk, p) * features.data()[static_cast<std::size_t>(ch * pixels + p)];
        }
        CHECK(std::abs(res.prototypes.values.at(ch, kk) - acc) < 1e-12);
      }
    }
  }
}

TEST_CASE("config validation") {
  AgcmConfig cfg = small_config(4, 3, 2, 2);
  CHECK_NOTHROW(cfg.validate());
  cfg.knn = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.knn = 2;
  cfg.edgeconv_layers = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.edgeconv_layers = 1;
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("dynamic graph rebuild is available behind the flag") {
  AgcmConfig cfg = small_config(3, 4, 2, 1);
  cfg.dynamic_graph = true;
  Module m = make_module(cfg, 39);
  Rng rng(40);
  Tensor features = random_tensor({3, 4, 4}, rng);
  Tensor out = agcm_forward(m.store, m.prefix, cfg, features);
  CHECK(out.shape() == Shape{7, 4, 4});
  out.ensure_finite("dynamic graph forward");
}
