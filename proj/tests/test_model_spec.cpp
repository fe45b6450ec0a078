#include <doctest.h>

#include "ditforge/model_spec.hpp"

using namespace ditforge;

TEST_CASE("derive_latent_shape: identity image bucket") {
  LatentTable table{{1, 1}};
  const auto b = derive_latent_shape(1, 256, 256, table, 16);
  CHECK(b.latent_frames == 1);
  CHECK(b.latent_height == 16);
  CHECK(b.latent_width == 16);
}

TEST_CASE("derive_latent_shape: calibrated video buckets") {
  const auto table = default_latent_table();
  CHECK(derive_latent_shape(68, 256, 256, table).latent_frames == 12);
  CHECK(derive_latent_shape(136, 256, 256, table).latent_frames == 24);
  CHECK(derive_latent_shape(204, 256, 256, table).latent_frames == 36);
}

TEST_CASE("derive_latent_shape: errors") {
  const auto table = default_latent_table();
  CHECK_THROWS_AS(derive_latent_shape(42, 256, 256, table), ValidationError);
  CHECK_THROWS_AS(derive_latent_shape(68, 250, 256, table), ValidationError);
}

TEST_CASE("derive_latent_shape is deterministic over configured buckets") {
  const auto table = default_latent_table();
  for (auto [frames, latent] : table) {
    const auto a = derive_latent_shape(frames, 512, 768, table);
    const auto b = derive_latent_shape(frames, 512, 768, table);
    CHECK(a == b);
    CHECK(a.latent_frames == latent);
    CHECK(a.latent_frames >= 1);
    CHECK(a.latent_frames <= a.frames);
  }
}

TEST_CASE("validate_config: product check") {
  ClusterSpec cluster{4, 8, 989, 80, 200, 50};
  ParallelismConfig cfg;
  cfg.tp = 8;
  cfg.cp = 1;
  cfg.pp = 1;
  cfg.dp = 4;
  CHECK(validate_config(cfg, cluster).ok());
}

TEST_CASE("validate_config: tp exceeds gpus_per_node") {
  ClusterSpec cluster{4, 8, 989, 80, 200, 50};
  ParallelismConfig cfg;
  cfg.tp = 16;
  cfg.dp = 2;
  const auto r = validate_config(cfg, cluster);
  REQUIRE(!r.ok());
  bool found = false;
  for (const auto& d : r.diagnostics)
    if (d.find("tp exceeds gpus_per_node") != std::string::npos) found = true;
  CHECK(found);
}

TEST_CASE("validate_config: degree product mismatch") {
  ClusterSpec cluster{4, 8, 989, 80, 200, 50};
  ParallelismConfig cfg;
  cfg.tp = 8;
  cfg.cp = 3;
  cfg.dp = 1;
  const auto r = validate_config(cfg, cluster);
  REQUIRE(!r.ok());
  CHECK(r.diagnostics.front().find("degree product mismatch") != std::string::npos);
}

TEST_CASE("validate_config: exhaustive small enumeration keeps the product invariant") {
  ClusterSpec cluster{2, 8, 989, 80, 200, 50};
  int valid = 0;
  for (std::int64_t tp : {1, 2, 4, 8})
    for (std::int64_t cp : {1, 2, 4})
      for (std::int64_t pp : {1, 2})
        for (std::int64_t dp : {1, 2, 4, 8, 16}) {
          ParallelismConfig cfg;
          cfg.tp = tp;
          cfg.cp = cp;
          cfg.pp = pp;
          cfg.dp = dp;
          if (validate_config(cfg, cluster).ok()) {
            CHECK(tp * cp * pp * dp == cluster.total_gpus());
            ++valid;
          }
        }
  CHECK(valid > 0);
}

TEST_CASE("json parsing rejects unknown fields") {
  json j = {{"layers", 48},   {"hidden_dim", 6144}, {"attention_heads", 48},
            {"param_count", 30e9}, {"bogus", 1}};
  CHECK_THROWS_AS(model_spec_from_json(j), ValidationError);
  j.erase("bogus");
  const auto m = model_spec_from_json(j);
  CHECK(m.layers == 48);
  CHECK(m.param_bytes == 2.0);  // default
}

TEST_CASE("cluster json requires positive fields") {
  json j = {{"nodes", 4},    {"gpus_per_node", 8},     {"peak_tflops_per_gpu", 989},
            {"hbm_gb", 80},  {"intra_node_bw_gbps", 200}, {"inter_node_bw_gbps", 0}};
  CHECK_THROWS_AS(cluster_spec_from_json(j), ValidationError);
}

TEST_CASE("parallelism config json round trip") {
  json j = {{"tp", 8}, {"sp", true}, {"cp", 2}, {"pp", 2}, {"vpp", 2},
            {"dp", 2}, {"zero1", true}, {"micro_batches", 8},
            {"cp_self_attn_mode", "head-wise"}, {"cp_cross_attn_mode", "sequence-wise"}};
  const auto c = parallelism_config_from_json(j);
  CHECK(c.tp == 8);
  CHECK(c.sp);
  CHECK(c.vpp == 2);
  CHECK(c.cp_self_attn_mode == CpAttnMode::kHeadWise);
  CHECK(c.cp_cross_attn_mode == CpAttnMode::kSequenceWise);
}
