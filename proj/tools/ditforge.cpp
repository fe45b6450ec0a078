// ditforge: emulator sweeps, batch planning, data-plane demos, and
// telemetry analysis from one entry point.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ditforge/cost_model.hpp"
#include "ditforge/emulator.hpp"
#include "ditforge/load_balancer.hpp"
#include "ditforge/model_spec.hpp"
#include "ditforge/pipe.hpp"
#include "ditforge/pipe_tcp.hpp"
#include "ditforge/telemetry.hpp"

namespace df = ditforge;
using nlohmann::json;

namespace {

int log_level() {
  const char* v = std::getenv("DITFORGE_LOG");
  return v ? std::atoi(v) : 0;
}

void logv(const std::string& msg) {
  if (log_level() > 0) std::cerr << "[ditforge] " << msg << "\n";
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw df::DomainError("cannot open " + path);
  return json::parse(in);
}

void emit(const json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::ofstream out(out_path);
    if (!out) throw df::DomainError("cannot write " + out_path);
    out << j.dump(2) << "\n";
  }
}

df::ResolutionBucket parse_bucket(const std::string& s, const df::LatentTable& table) {
  std::int64_t f = 0, h = 0, w = 0;
  char x1 = 0, x2 = 0;
  std::istringstream in(s);
  if (!(in >> f >> x1 >> h >> x2 >> w) || x1 != 'x' || x2 != 'x')
    throw df::ValidationError("bucket must look like 204x544x992, got '" + s + "'");
  return df::derive_latent_shape(f, h, w, table);
}

df::ParallelismConfig parse_pin(const std::string& s, const df::ClusterSpec& cluster) {
  df::ParallelismConfig cfg;
  cfg.micro_batches = 8;
  std::istringstream in(s);
  std::string kv;
  while (std::getline(in, kv, ',')) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw df::ValidationError("bad pin entry '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::int64_t val = std::stoll(kv.substr(eq + 1));
    if (key == "tp") cfg.tp = val;
    else if (key == "cp") cfg.cp = val;
    else if (key == "pp") cfg.pp = val;
    else if (key == "vpp") cfg.vpp = val;
    else if (key == "dp") cfg.dp = val;
    else if (key == "sp") cfg.sp = val != 0;
    else if (key == "zero1") cfg.zero1 = val != 0;
    else if (key == "micro_batches") cfg.micro_batches = val;
    else throw df::ValidationError("unknown pin key '" + key + "'");
  }
  if (cfg.dp == 1 && cluster.total_gpus() % (cfg.tp * cfg.cp * cfg.pp) == 0)
    cfg.dp = cluster.total_gpus() / (cfg.tp * cfg.cp * cfg.pp);
  return cfg;
}

json config_to_json(const df::ParallelismConfig& c) {
  return {{"tp", c.tp},   {"sp", c.sp},   {"cp", c.cp},
          {"pp", c.pp},   {"vpp", c.vpp}, {"dp", c.dp},
          {"zero1", c.zero1}, {"micro_batches", c.micro_batches},
          {"ckpt_fraction", c.ckpt_fraction}};
}

json estimate_to_json(const df::IterationEstimate& e) {
  return {{"compute_s", e.compute_s},
          {"exposed_comm_s", e.exposed_comm_s},
          {"bubble_fraction", e.bubble_fraction},
          {"iteration_s", e.iteration_s},
          {"mfu", e.mfu},
          {"memory_gb",
           {{"params", e.memory.params_gb},
            {"grads", e.memory.grads_gb},
            {"optimizer", e.memory.optimizer_gb},
            {"activations", e.memory.activations_gb},
            {"total", e.memory.total_gb}}}};
}

std::size_t parse_size(const std::string& s) {
  std::size_t mult = 1;
  std::string num = s;
  auto ends_with = [&](const char* suf) { return s.size() > 3 && s.ends_with(suf); };
  if (ends_with("KiB")) mult = 1024, num = s.substr(0, s.size() - 3);
  else if (ends_with("MiB")) mult = 1024 * 1024, num = s.substr(0, s.size() - 3);
  else if (ends_with("GiB")) mult = 1024ull * 1024 * 1024, num = s.substr(0, s.size() - 3);
  return static_cast<std::size_t>(std::stoull(num)) * mult;
}

double parse_rate(const std::string& s) {
  std::string num = s;
  if (s.ends_with("/s")) num = s.substr(0, s.size() - 2);
  return std::stod(num);
}

int cmd_calibrate(const std::string& table_path, const std::string& out_path) {
  const df::FlopsTable table = df::flops_table_from_json(load_json_file(table_path));
  const df::CostCoefficients co = df::calibrate(table);
  json j = {{"latent_multiplier_k", co.latent_multiplier_k},
            {"constant_c", co.constant_c},
            {"linear_a", co.linear_a},
            {"quad_b", co.quad_b},
            {"max_rel_residual", co.fit_max_rel_residual}};
  json rows = json::array();
  for (const auto& row : table.rows) {
    df::ResolutionBucket b;
    b.frames = row.frames;
    b.height = row.height;
    b.width = row.width;
    b.latent_frames = co.latent_frames_for(row.frames);
    const double pred = df::sample_flops(co, b);
    rows.push_back({{"frames", row.frames},
                    {"height", row.height},
                    {"width", row.width},
                    {"tflops", row.tflops},
                    {"predicted", pred},
                    {"rel_error", std::fabs(pred - row.tflops) / row.tflops}});
  }
  j["rows"] = rows;
  emit(j, out_path);
  std::cerr << "k=" << co.latent_multiplier_k << " max residual "
            << co.fit_max_rel_residual * 100 << "%\n";
  return 0;
}

int cmd_sweep(const std::string& model_path, const std::string& cluster_path,
              const std::string& bucket_str, const std::string& pin_str,
              const std::string& table_path, std::int64_t batch, const std::string& out_path) {
  const df::ModelSpec model = df::model_spec_from_json(load_json_file(model_path));
  const df::ClusterSpec cluster = df::cluster_spec_from_json(load_json_file(cluster_path));
  const df::FlopsTable table =
      table_path.empty() ? df::reference_flops_table() : df::flops_table_from_json(load_json_file(table_path));
  const df::CostCoefficients co = df::calibrate(table);
  const df::ResolutionBucket bucket =
      parse_bucket(bucket_str, co.latent_table_for({1, 68, 136, 204}));

  df::SearchSpace space;
  space.batch_per_dp_rank = batch;
  std::optional<df::ParallelismConfig> pin;
  if (!pin_str.empty()) pin = parse_pin(pin_str, cluster);

  const df::SearchReport rep = df::search_configs(model, cluster, bucket, space, co, {}, pin);

  json j;
  j["entries"] = json::array();
  for (const auto& e : rep.entries)
    j["entries"].push_back({{"config", config_to_json(e.config)},
                            {"estimate", estimate_to_json(e.estimate)}});
  j["infeasible"] = json::array();
  for (const auto& e : rep.infeasible)
    j["infeasible"].push_back({{"config", config_to_json(e.config)}, {"reason", e.reason}});
  if (rep.pinned) j["pinned"] = config_to_json(*rep.pinned);
  if (rep.pinned_mfu) j["pinned_mfu"] = *rep.pinned_mfu;
  if (rep.pinned_gap) j["pinned_gap"] = *rep.pinned_gap;
  emit(j, out_path);

  // text rendering: config rows x MFU column
  std::cerr << std::left << std::setw(34) << "config" << std::right << std::setw(8) << "MFU"
            << std::setw(12) << "iter (s)" << "\n";
  for (const auto& e : rep.entries)
    std::cerr << std::left << std::setw(34) << e.config.key() << std::right << std::setw(8)
              << std::fixed << std::setprecision(4) << e.estimate.mfu << std::setw(12)
              << std::setprecision(3) << e.estimate.iteration_s << "\n";
  if (rep.pinned_gap)
    std::cerr << "pinned config MFU gap vs best: " << std::setprecision(4)
              << *rep.pinned_gap * 100 << "%\n";
  return 0;
}

int cmd_plan(const std::string& manifest_path, const std::string& target_str, double alpha,
             double beta, std::int64_t cache_n, const std::string& table_path,
             const std::string& out_path) {
  const df::FlopsTable table =
      table_path.empty() ? df::reference_flops_table() : df::flops_table_from_json(load_json_file(table_path));
  std::int64_t f = 0, h = 0, w = 0;
  char x1 = 0, x2 = 0;
  std::istringstream ts(target_str);
  if (!(ts >> f >> x1 >> h >> x2 >> w) || x1 != 'x' || x2 != 'x')
    throw df::ValidationError("target must look like 204x256x256");
  const df::FlopsRow target = df::find_row(table, f, h, w);

  std::vector<df::ClipRecord> clips;
  std::ifstream in(manifest_path);
  if (!in) throw df::DomainError("cannot open " + manifest_path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      clips.push_back(df::clip_record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw df::DomainError(manifest_path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  df::BalancerConfig cfg;
  cfg.alpha = alpha;
  cfg.beta = beta;
  cfg.cache_n = cache_n;
  cfg.f_target = target.tflops;
  const df::BatchPlan plan = df::plan_batches(clips, table, target, cfg);
  emit(df::batch_plan_to_json(plan), out_path);
  return 0;
}

int cmd_pipe_produce(const std::string& peers_path, const std::string& pipe_name, double rate,
                     std::size_t frame_bytes, std::int64_t count) {
  const df::PeersConfig peers = df::peers_config_from_json(load_json_file(peers_path));
  const auto& entry = peers.find(pipe_name);
  if (entry.producers.empty()) throw df::DomainError("no producer address for pipe");
  const auto addr = df::net::split_addr(entry.producers.front());

  df::TcpProducerServer server(pipe_name, entry.mode, addr.port);
  logv("producing on port " + std::to_string(server.port()));
  // give declared consumers a moment to connect
  std::this_thread::sleep_for(std::chrono::milliseconds(500));

  const auto period = std::chrono::duration<double>(rate > 0 ? 1.0 / rate : 0.0);
  for (std::int64_t i = 0; i < count; ++i) {
    df::Frame f;
    f.name = pipe_name;
    f.seq_no = static_cast<std::uint64_t>(i);
    f.dtype = df::Dtype::kUint8;
    f.shape = {frame_bytes};
    f.payload.assign(frame_bytes, static_cast<std::uint8_t>(i & 0xff));
    server.send(std::move(f));
    if (period.count() > 0) std::this_thread::sleep_for(period);
  }
  server.close_pipe();
  std::this_thread::sleep_for(std::chrono::milliseconds(500));
  const df::PipeMetrics m = server.metrics();
  json j = {{"produced", m.produced},
            {"consumed", m.consumed},
            {"dropped", m.dropped},
            {"queue_latency_mean_ns", m.queue_latency.mean_ns()},
            {"transfer_mean_ns", m.transfer.mean_ns()}};
  std::cout << j.dump(2) << "\n";
  server.stop();
  return 0;
}

int cmd_pipe_consume(const std::string& peers_path, const std::string& pipe_name,
                     const std::string& job_id) {
  const df::PeersConfig peers = df::peers_config_from_json(load_json_file(peers_path));
  const auto& entry = peers.find(pipe_name);
  if (entry.producers.empty()) throw df::DomainError("no producer address for pipe");
  const auto addr = df::net::split_addr(entry.producers.front());

  df::TcpConsumerClient client(addr.host, addr.port, pipe_name, job_id);
  std::uint64_t received = 0, bytes = 0;
  while (auto f = client.recv()) {
    ++received;
    bytes += f->payload.size();
  }
  json j = {{"received", received}, {"payload_bytes", bytes}, {"corrupt_events", client.corrupt_events()}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_pipe_demo(std::int64_t frames) {
  // one producer broadcasting to two jobs; job-a is a two-consumer spray
  // group, job-b a single consumer
  df::PipeRegistry registry;
  auto producer = registry.declare_producer("latents", df::PipeMode::kBroadcast);
  auto a0 = registry.declare_consumer("latents", "job-a");
  auto a1 = registry.declare_consumer("latents", "job-a");
  auto b0 = registry.declare_consumer("latents", "job-b");

  std::atomic<std::uint64_t> a_count{0}, b_count{0};
  std::thread ta0([&] { while (a0->recv()) ++a_count; });
  std::thread ta1([&] { while (a1->recv()) ++a_count; });
  std::thread tb0([&] { while (b0->recv()) ++b_count; });

  for (std::int64_t i = 0; i < frames; ++i) {
    df::Frame f;
    f.name = "latents";
    f.seq_no = static_cast<std::uint64_t>(i);
    f.dtype = df::Dtype::kFloat32;
    f.shape = {16, 16};
    f.payload.assign(16 * 16 * 4, 0);
    producer->send(std::move(f));
  }
  producer->close();
  ta0.join();
  ta1.join();
  tb0.join();

  const df::PipeMetrics m = registry.metrics("latents");
  json j = {{"produced", m.produced},
            {"consumed", m.consumed},
            {"dropped", m.dropped},
            {"job_a_received", a_count.load()},
            {"job_b_received", b_count.load()},
            {"queue_latency_mean_ns", m.queue_latency.mean_ns()},
            {"stall_alarm", m.stall_alarm(64)}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_telemetry(const std::string& spool_dir, bool stragglers, const std::string& stage_str,
                  double k, bool effective_time, bool data_stats,
                  const std::string& restart_check_path, const std::string& out_path) {
  const df::TelemetryStore store = df::ingest(spool_dir);
  json j;
  j["events"] = store.size();
  j["quarantined"] = store.quarantined().size();
  if (stragglers) {
    std::int64_t lo = std::numeric_limits<std::int64_t>::min();
    std::int64_t hi = std::numeric_limits<std::int64_t>::max();
    const auto rep = df::detect_stragglers(store, lo, hi, df::stage_from_string(stage_str), k);
    j["stragglers"] = {{"flagged_ranks", rep.flagged_ranks},
                       {"global_median_ns", rep.global_median_ns},
                       {"mad_ns", rep.mad_ns},
                       {"threshold_ns", rep.threshold_ns}};
  }
  if (effective_time) j["effective_training_time"] = df::effective_training_time(store);
  if (data_stats) {
    const auto d = df::data_distribution(store);
    j["data_stats"] = {{"per_source_counts", d.per_source_counts}, {"duplicates", d.duplicates}};
  }
  if (!restart_check_path.empty()) {
    const json sj = load_json_file(restart_check_path);
    std::set<std::string> active;
    for (const auto& s : sj.at("active")) active.insert(s.get<std::string>());
    const std::int64_t q = sj.value("quorum", std::int64_t{2});
    j["restart_decision"] =
        df::restart_decision(active, q) == df::RestartDecision::kRestart ? "restart" : "continue";
  }
  emit(j, out_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ditforge: training-system emulation, load balancing, data plane, telemetry"};
  app.require_subcommand(1);

  std::string table_path, out_path;
  auto* calibrate = app.add_subcommand("calibrate", "fit cost coefficients to a FLOPs table");
  calibrate->add_option("--table", table_path, "FLOPs table JSON")->required();
  calibrate->add_option("--out", out_path, "output JSON path");

  auto* emu = app.add_subcommand("emu", "emulator commands");
  std::string model_path, cluster_path, bucket_str, pin_str, sweep_table;
  std::int64_t batch = 1;
  auto* sweep = emu->add_subcommand("sweep", "sweep parallelism configs");
  sweep->add_option("--model", model_path, "model spec JSON")->required();
  sweep->add_option("--cluster", cluster_path, "cluster spec JSON")->required();
  sweep->add_option("--bucket", bucket_str, "resolution bucket FxHxW")->required();
  sweep->add_option("--pin", pin_str, "pinned config, e.g. tp=8,sp=1,zero1=1");
  sweep->add_option("--flops-table", sweep_table, "FLOPs table JSON (default: bundled)");
  sweep->add_option("--batch", batch, "samples per DP rank per iteration");
  sweep->add_option("--out", out_path, "output JSON path");

  std::string manifest_path, target_str;
  double alpha = 1.0, beta = 0.1;
  std::int64_t cache_n = 8;
  std::string plan_table;
  auto* plan = app.add_subcommand("plan", "hybrid-grained batch plan from a clip manifest");
  plan->add_option("--manifest", manifest_path, "JSONL clip manifest")->required();
  plan->add_option("--target", target_str, "target resolution FxHxW")->required();
  plan->add_option("--alpha", alpha, "normalization factor");
  plan->add_option("--beta", beta, "video-to-image ratio");
  plan->add_option("--cache", cache_n, "cached video batches");
  plan->add_option("--flops-table", plan_table, "FLOPs table JSON (default: bundled)");
  plan->add_option("--out", out_path, "output JSON path");

  auto* pipe = app.add_subcommand("pipe", "data-plane commands");
  std::string peers_path, pipe_name, job_id = "job-0", rate_str = "0", size_str = "4KiB";
  std::int64_t count = 100, demo_frames = 100;
  auto* produce = pipe->add_subcommand("produce", "serve a pipe over TCP");
  produce->add_option("--peers", peers_path, "peers JSON")->required();
  produce->add_option("--pipe", pipe_name, "pipe name")->required();
  produce->add_option("--rate", rate_str, "frames per second, e.g. 100/s (0 = unthrottled)");
  produce->add_option("--size", size_str, "payload size, e.g. 4MiB");
  produce->add_option("--count", count, "frames to send");
  auto* consume = pipe->add_subcommand("consume", "consume a pipe over TCP");
  consume->add_option("--peers", peers_path, "peers JSON")->required();
  consume->add_option("--pipe", pipe_name, "pipe name")->required();
  consume->add_option("--job", job_id, "job id");
  auto* demo = pipe->add_subcommand("demo", "in-process broadcast/spray rehearsal");
  demo->add_option("--frames", demo_frames, "frames to stream");

  std::string spool_dir, stage_str = "backward", restart_check_path;
  double k = 6.0;
  bool stragglers = false, effective_time = false, data_stats = false;
  auto* telemetry = app.add_subcommand("telemetry", "telemetry commands");
  auto* analyze = telemetry->add_subcommand("analyze", "analyze a spool directory");
  analyze->add_option("--spool", spool_dir, "spool directory")->required();
  analyze->add_flag("--stragglers", stragglers, "run straggler detection");
  analyze->add_option("--stage", stage_str, "stage for straggler detection");
  analyze->add_option("--k", k, "MAD multiplier");
  analyze->add_flag("--effective-time", effective_time, "compute effective training time");
  analyze->add_flag("--data-stats", data_stats, "per-source counts and duplicates");
  analyze->add_option("--restart-check", restart_check_path, "signals JSON for restart decision");
  analyze->add_option("--out", out_path, "output JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (calibrate->parsed()) return cmd_calibrate(table_path, out_path);
    if (sweep->parsed())
      return cmd_sweep(model_path, cluster_path, bucket_str, pin_str, sweep_table, batch, out_path);
    if (plan->parsed())
      return cmd_plan(manifest_path, target_str, alpha, beta, cache_n, plan_table, out_path);
    if (produce->parsed())
      return cmd_pipe_produce(peers_path, pipe_name, parse_rate(rate_str), parse_size(size_str),
                              count);
    if (consume->parsed()) return cmd_pipe_consume(peers_path, pipe_name, job_id);
    if (demo->parsed()) return cmd_pipe_demo(demo_frames);
    if (analyze->parsed())
      return cmd_telemetry(spool_dir, stragglers, stage_str, k, effective_time, data_stats,
                           restart_check_path, out_path);
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const df::DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
