#include <doctest.h>

#include <algorithm>
#include <random>

#include "ditforge/load_balancer.hpp"

using namespace ditforge;

namespace {

FlopsRow row_204_256() { return find_row(reference_flops_table(), 204, 256, 256); }

}  // namespace

TEST_CASE("coarse batch sizes at alpha=1 against the reference table") {
  const auto table = reference_flops_table();
  const auto sizes = coarse_batch_sizes(table, row_204_256(), 1.0);
  REQUIRE(sizes.size() == 7);
  const std::int64_t expected[] = {1, 1, 1, 1, 3, 3, 38};
  for (std::size_t i = 0; i < sizes.size(); ++i) CHECK(sizes[i].batch_size == expected[i]);
}

TEST_CASE("coarse batch sizes reject bad alpha") {
  const auto table = reference_flops_table();
  CHECK_THROWS_AS(coarse_batch_sizes(table, row_204_256(), 0.0), ValidationError);
  CHECK_THROWS_AS(coarse_batch_sizes(table, row_204_256(), -1.0), ValidationError);
  // alpha so large the target row itself floors to zero; error names a resolution
  try {
    coarse_batch_sizes(table, row_204_256(), 10.0);
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("204x256x256") != std::string::npos);
  }
}

TEST_CASE("B_r floor characterization and monotonicity in alpha") {
  const auto table = reference_flops_table();
  const auto target = row_204_256();
  std::vector<std::int64_t> prev;
  for (double alpha : {0.1, 0.2, 0.5, 0.8, 1.0}) {
    const auto sizes = coarse_batch_sizes(table, target, alpha);
    std::vector<std::int64_t> cur;
    for (const auto& s : sizes) {
      // B_r * alpha * F_r <= F_target < (B_r + 1) * alpha * F_r
      CHECK(static_cast<double>(s.batch_size) * alpha * s.row.tflops <=
            target.tflops * (1 + 1e-9));
      CHECK(static_cast<double>(s.batch_size + 1) * alpha * s.row.tflops >
            target.tflops * (1 - 1e-9));
      cur.push_back(s.batch_size);
    }
    if (!prev.empty())
      for (std::size_t i = 0; i < cur.size(); ++i) CHECK(cur[i] <= prev[i]);
    prev = cur;
  }
}

TEST_CASE("solve_alpha recovers an exact breakpoint") {
  // two-row table where alpha = 0.5 is the largest value reaching the batch
  FlopsTable table;
  table.rows = {{4, 256, 256, 100.0}, {2, 256, 256, 50.0}};
  const FlopsRow target = table.rows[0];
  // at alpha=0.5: B = [2, 4], weighted sum with weights [1,1] = 6
  const double alpha = solve_alpha(table, target, {1.0, 1.0}, 6);
  CHECK(alpha == doctest::Approx(0.5).epsilon(1e-9));
  const auto sizes = coarse_batch_sizes(table, target, alpha);
  CHECK(sizes[0].batch_size == 2);
  CHECK(sizes[1].batch_size == 4);
}

TEST_CASE("solve_alpha result is feasible and maximal on the reference table") {
  const auto table = reference_flops_table();
  const auto target = row_204_256();
  std::vector<double> weights(table.rows.size(), 1.0);
  const double alpha = solve_alpha(table, target, weights, 32);
  // total batch at a given alpha, or -1 when some row floors to zero
  auto total = [&](double a) -> double {
    try {
      double sum = 0;
      for (const auto& s : coarse_batch_sizes(table, target, a)) sum += s.batch_size;
      return sum;
    } catch (const DomainError&) {
      return -1;
    }
  };
  CHECK(total(alpha) >= 32);
  CHECK(total(alpha * 1.001) < 32);  // any larger alpha under-fills or breaks a row
}

TEST_CASE("solve_alpha rejects an unreachable global batch") {
  const auto table = reference_flops_table();
  std::vector<double> weights(table.rows.size(), 1.0);
  CHECK_THROWS_AS(solve_alpha(table, row_204_256(), weights, 3), DomainError);
  CHECK_THROWS_AS(solve_alpha(table, row_204_256(), {1.0}, 32), ValidationError);
}

TEST_CASE("greedy_pad worked example") {
  // bases in TFLOPs; 10 images of 44.99 each
  const std::vector<double> bases = {1717.20, 1004.89, 239.37};
  const auto padded = greedy_pad(bases, 10, 44.99);
  REQUIRE(padded.size() == 3);
  CHECK(padded[0].images_added == 0);
  CHECK(padded[1].images_added == 0);
  CHECK(padded[2].images_added == 10);
  CHECK(padded[0].final_flops == doctest::Approx(1717.20));
  CHECK(padded[1].final_flops == doctest::Approx(1004.89));
  CHECK(padded[2].final_flops == doctest::Approx(689.27));
}

TEST_CASE("greedy_pad with zero budget is the identity") {
  const std::vector<double> bases = {3.0, 1.0, 2.0};
  const auto padded = greedy_pad(bases, 0, 5.0);
  for (std::size_t i = 0; i < bases.size(); ++i) {
    CHECK(padded[i].images_added == 0);
    CHECK(padded[i].final_flops == bases[i]);
  }
  CHECK_THROWS_AS(greedy_pad(bases, -1, 5.0), ValidationError);
}

TEST_CASE("greedy_pad ties break toward the lowest batch id") {
  const auto padded = greedy_pad({10.0, 10.0, 10.0}, 1, 2.0);
  CHECK(padded[0].images_added == 1);
  CHECK(padded[1].images_added == 0);
  CHECK(padded[2].images_added == 0);
}

TEST_CASE("greedy_pad never widens the spread") {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> load(10.0, 500.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> bases(1 + rng() % 5);
    for (auto& b : bases) b = load(rng);
    const auto [lo0, hi0] = std::minmax_element(bases.begin(), bases.end());
    const double spread0 = *hi0 - *lo0;
    const auto padded = greedy_pad(bases, 1 + rng() % 8, load(rng) / 10.0);
    double lo = padded[0].final_flops, hi = padded[0].final_flops;
    for (const auto& p : padded) {
      lo = std::min(lo, p.final_flops);
      hi = std::max(hi, p.final_flops);
    }
    CHECK(hi - lo <= spread0 + 1e-9);
  }
}

TEST_CASE("greedy_pad max load is within one image of the exhaustive optimum") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> load(10.0, 300.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> bases(2 + rng() % 4);  // 2..5 batches
    for (auto& b : bases) b = load(rng);
    const std::int64_t budget = 1 + static_cast<std::int64_t>(rng() % 8);
    const double image_flops = load(rng) / 20.0;
    const double opt = brute_force_pad(bases, budget, image_flops);
    const auto padded = greedy_pad(bases, budget, image_flops);
    double greedy_max = 0;
    for (const auto& p : padded) greedy_max = std::max(greedy_max, p.final_flops);
    CHECK(greedy_max <= opt + image_flops + 1e-9);
  }
}

TEST_CASE("brute_force_pad refuses oversized instances") {
  CHECK_THROWS_AS(brute_force_pad(std::vector<double>(7, 1.0), 2, 1.0), DomainError);
  CHECK_THROWS_AS(brute_force_pad({1.0}, 11, 1.0), DomainError);
  CHECK_THROWS_AS(brute_force_pad({}, 2, 1.0), ValidationError);
}

TEST_CASE("image_budget rounding") {
  CHECK(image_budget(30, 0.1) == 3);
  CHECK(image_budget(30, 0.0) == 0);
  CHECK(image_budget(25, 0.1) == 2);  // 2.5 rounds half to even
  CHECK(image_budget(35, 0.1) == 4);  // 3.5 rounds half to even
  CHECK_THROWS_AS(image_budget(30, -0.5), ValidationError);
}

TEST_CASE("bucketize frames and aspect") {
  auto b = bucketize(204, 544, 992);
  CHECK(b.frame_bucket == 204);
  CHECK(b.aspect == AspectBucket::kLandscape);

  b = bucketize(150, 1080, 1080);
  CHECK(b.frame_bucket == 136);
  CHECK(b.aspect == AspectBucket::kSquare);

  b = bucketize(1, 720, 1280);
  CHECK(b.frame_bucket == 1);
  CHECK(b.aspect == AspectBucket::kLandscape);

  b = bucketize(67, 992, 544);  // below the smallest video bucket -> image bucket
  CHECK(b.frame_bucket == 1);
  CHECK(b.aspect == AspectBucket::kPortrait);

  CHECK_THROWS_AS(bucketize(0, 256, 256), ValidationError);
  CHECK_THROWS_AS(bucketize(10, 0, 256), ValidationError);
}

TEST_CASE("plan_batches end to end on a synthetic manifest") {
  const auto table = reference_flops_table();
  BalancerConfig cfg;
  cfg.alpha = 1.0;
  cfg.beta = 0.5;
  cfg.cache_n = 4;
  // B at alpha=1: 204-frame rows take 1 clip per batch, 68x256x256 takes 3
  std::vector<ClipRecord> clips;
  for (int i = 0; i < 2; ++i)
    clips.push_back({"l" + std::to_string(i), 204, 544, 992, "", 8.5});
  for (int i = 0; i < 6; ++i)
    clips.push_back({"s" + std::to_string(i), 68, 512, 512, "", 2.8});
  const auto plan = plan_batches(clips, table, row_204_256(), cfg);
  REQUIRE(plan.padded_batches.size() == 4);
  // 2 landscape 204-frame batches of 1 + 2 square 68-frame batches of 3
  CHECK(plan.padded_batches[0].base_flops == doctest::Approx(1592.61));
  CHECK(plan.padded_batches[1].base_flops == doctest::Approx(1592.61));
  CHECK(plan.padded_batches[2].base_flops == doctest::Approx(3 * 509.31));
  CHECK(plan.padded_batches[3].base_flops == doctest::Approx(3 * 509.31));
  // 8 cached videos * beta 0.5 = 4 images
  CHECK(plan.image_budget == 4);
  std::int64_t images = 0;
  for (const auto& b : plan.padded_batches) images += b.images_added;
  CHECK(images == 4);
}

TEST_CASE("clip records parse and reject unknown fields") {
  const auto c = clip_record_from_json(
      json::parse(R"({"id":"a","frames":204,"height":544,"width":992,"duration_s":8.5})"));
  CHECK(c.id == "a");
  CHECK(c.duration_s == doctest::Approx(8.5));
  CHECK_THROWS_AS(
      clip_record_from_json(json::parse(R"({"id":"a","frames":1,"height":2,"width":3,"x":1})")),
      ValidationError);
  CHECK_THROWS_AS(clip_record_from_json(json::parse(R"({"id":"a"})")), ValidationError);
}
