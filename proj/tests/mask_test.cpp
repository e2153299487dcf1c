#include "psgd/mask_strategy.hpp"
#include "psgd/model_zoo.hpp"

#include <gtest/gtest.h>

#include <random>
#include <set>

using namespace psgd;

namespace {

RealVector gaussian(Index d, Rng& rng) {
  std::normal_distribution<double> n;
  RealVector v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

}  // namespace

TEST(Mask, RejectsNonBinaryAndEmpty) {
  RealVector v(3);
  v << 1, 0.5, 0;
  EXPECT_THROW(Mask::from_values(v), ContractError);
  EXPECT_THROW(Mask::from_values(RealVector::Zero(3)), ContractError);
  EXPECT_TRUE(Mask::sentinel(3).is_sentinel());
}

TEST(Mask, GroupsMustBeConstant) {
  RealVector v(4);
  v << 1, 0, 1, 1;
  EXPECT_THROW(Mask::from_values(v, Granularity::PerTensor, {0, 0, 1, 1}), ContractError);
  EXPECT_NO_THROW(Mask::from_values(v, Granularity::PerTensor, {0, 1, 0, 0}));
}

TEST(Mask, ProjectionAndPythagoras) {
  Rng rng(1);
  std::bernoulli_distribution coin(0.4);
  for (int rep = 0; rep < 200; ++rep) {
    const Index d = 1 + rep % 37;
    RealVector pv(d);
    for (auto& x : pv) x = coin(rng) ? 1.0 : 0.0;
    pv[rep % d] = 1.0;
    const Mask p = Mask::from_values(pv);
    const RealVector v = gaussian(d, rng);
    EXPECT_TRUE(bit_equal(p.apply(p.apply(v)), p.apply(v)));
    const double split = p.apply(v).squaredNorm() + p.apply_complement(v).squaredNorm();
    EXPECT_LE(std::abs(split - v.squaredNorm()), 1e-12 * v.squaredNorm());
  }
}

TEST(NextMask, AllOnesEveryStep) {
  auto s = MaskStrategy::all_ones();
  Rng rng(0);
  for (Index t : {0, 1, 17}) EXPECT_TRUE(next_mask(s, t, 5, nullptr, rng).is_all_ones());
}

TEST(NextMask, TopKExample) {
  auto s = MaskStrategy::top_k(2);
  Rng rng(0);
  RealVector g(4);
  g << 5, -3, 1, 0;
  const Mask p = next_mask(s, 0, 4, &g, rng);
  EXPECT_EQ(p.indices(), (std::vector<Index>{0, 1}));
}

TEST(NextMask, TopKTiesGoToLowerIndex) {
  RealVector g(5);
  g << 1, -2, 2, 1, -2;
  EXPECT_EQ(top_k_mask(g, 2).indices(), (std::vector<Index>{1, 2}));
  EXPECT_EQ(top_k_mask(g, 4).indices(), (std::vector<Index>{0, 1, 2, 4}));
}

TEST(NextMask, TopKWithoutGradientIsContractError) {
  auto s = MaskStrategy::top_k(1);
  Rng rng(0);
  EXPECT_THROW(next_mask(s, 0, 3, nullptr, rng), ContractError);
  EXPECT_THROW(top_k_mask(RealVector::Ones(3), 4), ContractError);
}

TEST(NextMask, AlternatingSuperCore) {
  const auto net = build_mlp({{3, 4, 2}});
  const Mask core = slim_width_mask(net, 0.5);
  auto s = MaskStrategy::alternating({Mask::ones(net.dim()), core});
  Rng rng(0);
  for (Index t = 0; t < 6; ++t) {
    const Mask p = next_mask(s, t, net.dim(), nullptr, rng);
    if (t % 2 == 0) EXPECT_TRUE(p.is_all_ones());
    else EXPECT_EQ(p, core);
  }
}

TEST(NextMask, InvalidStrategyParameters) {
  EXPECT_THROW(MaskStrategy::dropout(0.0), ContractError);
  EXPECT_THROW(MaskStrategy::dropout(1.2), ContractError);
  EXPECT_THROW(MaskStrategy::top_k(0), ContractError);
  EXPECT_THROW(MaskStrategy::alternating({}), ContractError);
}

TEST(NextMask, DropoutNeverEmptyAndRespectsGroups) {
  const auto net = build_mlp({{3, 6, 2}});
  auto s = MaskStrategy::tensor_dropout(0.3, net.layout);
  Rng rng(4);
  for (Index t = 0; t < 200; ++t) {
    const Mask p = next_mask(s, t, net.dim(), nullptr, rng);
    EXPECT_GT(p.count(), 0);
    for (const auto& slot : net.layout->slots()) {
      const double first = p.values()[slot.offset];
      EXPECT_TRUE((p.values().segment(slot.offset, slot.size()).array() == first).all());
    }
  }
}

TEST(NextMask, NeuronDropoutMasksAllIncidentWeights) {
  const auto net = build_mlp({{3, 6, 2}});
  const auto inc = neuron_incidence(net);
  auto s = MaskStrategy::neuron_dropout(0.5, inc);
  Rng rng(7);
  const auto& L = *net.layout;
  for (Index t = 0; t < 50; ++t) {
    const Mask p = next_mask(s, t, net.dim(), nullptr, rng);
    const auto& w0 = L.slot(*net.layers[0].weight);
    const auto& b0 = L.slot(*net.layers[0].bias);
    const auto& w1 = L.slot(*net.layers[1].weight);
    for (Index j = 0; j < 6; ++j) {
      const bool kept = p[b0.coord(j, 0)];
      for (Index c = 0; c < 3; ++c) EXPECT_EQ(p[w0.coord(j, c)], kept);
      for (Index r = 0; r < 2; ++r) EXPECT_EQ(p[w1.coord(r, j)], kept);
    }
  }
}

TEST(Overlap, Examples) {
  RealVector g(2);
  g << 3, 4;
  EXPECT_DOUBLE_EQ(mask_overlap_ratio(Mask::ones(2), g), 1.0);
  const Index on[] = {0};
  EXPECT_DOUBLE_EQ(mask_overlap_ratio(Mask::from_indices(2, on), g), 25.0 / 9.0);
  EXPECT_THROW(mask_overlap_ratio(Mask::sentinel(2), g), DegenerateError);
  RealVector h(2);
  h << 0, 4;
  EXPECT_THROW(mask_overlap_ratio(Mask::from_indices(2, on), h), DegenerateError);
}

TEST(MeProp, OverlapBoundedByDOverK) {
  Rng rng(13);
  const Index d = 64;
  for (int rep = 0; rep < 2000; ++rep) {
    const RealVector g = gaussian(d, rng);
    for (Index k : {Index{1}, d / 4, d / 2, d}) {
      const double ratio = g.squaredNorm() / top_k_mask(g, k).apply(g).squaredNorm();
      EXPECT_LE(ratio, static_cast<double>(d) / static_cast<double>(k));
    }
  }
}

TEST(Dropout, ExpectedMaskedNormSquared) {
  Rng rng(21);
  const Index d = 50;
  const RealVector g = gaussian(d, rng);
  for (double mu : {0.3, 0.9}) {
    auto s = MaskStrategy::dropout(mu);
    double sum = 0.0;
    const int n = 40000;
    for (int i = 0; i < n; ++i) sum += next_mask(s, i, d, nullptr, rng).apply(g).squaredNorm();
    EXPECT_NEAR(sum / n / (mu * g.squaredNorm()), 1.0, 0.01);
  }
}

TEST(Partition, SingleWorkerIsAllOnes) {
  const auto net = build_mlp({{2, 4, 2}});
  Rng rng(0);
  const auto masks = partition_disjoint(neuron_incidence(net), 1, rng);
  ASSERT_EQ(masks.size(), 1u);
  EXPECT_TRUE(masks[0].is_all_ones());
}

TEST(Partition, TwoWorkersDisjointAndComplete) {
  const auto net = build_mlp({{2, 4, 2}});
  Rng rng(5);
  const auto masks = partition_disjoint(neuron_incidence(net), 2, rng);
  ASSERT_EQ(masks.size(), 2u);
  EXPECT_EQ((masks[0].values().array() * masks[1].values().array()).sum(), 0.0);
  EXPECT_TRUE(((masks[0].values() + masks[1].values()).array() == 1.0).all());
}

TEST(Partition, FixedSeedEnumerated) {
  const auto net = build_mlp({{2, 4, 2}});
  const std::uint64_t seed = 77;
  Rng rng(seed);
  const auto masks = partition_disjoint(neuron_incidence(net), 2, rng);

  // Same draw: neuron perm[j] goes to worker j mod 2.
  Rng replay(seed);
  std::vector<Index> perm{0, 1, 2, 3};
  std::shuffle(perm.begin(), perm.end(), replay);
  std::vector<Index> owner(4);
  for (std::size_t j = 0; j < 4; ++j) owner[static_cast<std::size_t>(perm[j])] = static_cast<Index>(j % 2);

  const auto& L = *net.layout;
  for (Index w = 0; w < 2; ++w) {
    std::set<Index> expect;
    for (Index n = 0; n < 4; ++n) {
      if (owner[static_cast<std::size_t>(n)] != w) continue;
      for (Index c = 0; c < 2; ++c) expect.insert(L.slot(*net.layers[0].weight).coord(n, c));
      expect.insert(L.slot(*net.layers[0].bias).coord(n, 0));
      for (Index r = 0; r < 2; ++r) expect.insert(L.slot(*net.layers[1].weight).coord(r, n));
    }
    if (w == 0) {
      for (Index r = 0; r < 2; ++r) expect.insert(L.slot(*net.layers[1].bias).coord(r, 0));
    }
    const auto got = masks[static_cast<std::size_t>(w)].indices();
    EXPECT_EQ(std::vector<Index>(expect.begin(), expect.end()), got) << "worker " << w;
  }
}

TEST(Partition, DeepNetworkPairwiseDisjoint) {
  const auto net = build_mlp({{3, 8, 8, 2}});
  Rng rng(3);
  for (Index k : {2, 4}) {
    const auto masks = partition_disjoint(neuron_incidence(net), k, rng);
    RealVector total = RealVector::Zero(net.dim());
    for (const auto& m : masks) total += m.values();
    EXPECT_LE(total.maxCoeff(), 1.0);
  }
}

TEST(Partition, LayerNarrowerThanKIsContractError) {
  const auto net = build_mlp({{2, 3, 2}});
  Rng rng(0);
  EXPECT_THROW(partition_disjoint(neuron_incidence(net), 4, rng), ContractError);
}

TEST(Partition, StrategyRepartitionsEveryRound) {
  const auto net = build_mlp({{2, 8, 2}});
  auto s = MaskStrategy::disjoint(2, 3, neuron_incidence(net));
  Rng rng(1);
  std::vector<Mask> seen;
  for (Index t = 0; t < 12; ++t) seen.push_back(next_mask(s, t, net.dim(), nullptr, rng));
  // Within a round of k * s = 6 steps the worker masks cycle with period k.
  for (Index t = 0; t + 2 < 6; ++t) EXPECT_EQ(seen[t], seen[t + 2]);
  EXPECT_FALSE(seen[0] == seen[1]);
}
