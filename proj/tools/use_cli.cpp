// Command-line front end: data generation, training, embedding, state updates,
// evaluation, the dynamic simulation and the update-cost benchmark.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "use/data.hpp"
#include "use/eval.hpp"
#include "use/run_config.hpp"
#include "use/state_store.hpp"
#include "use/trainer.hpp"

namespace {

using namespace use;

// Options every subcommand accepts.
struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  int workers = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "key = value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override a configuration key (key=value), repeatable");
  cmd->add_option("--seed", c.seed, "random seed");
  cmd->add_option("--workers", c.workers, "worker count; computation is single-threaded, so any value is bit-reproducible")
      ->check(CLI::PositiveNumber);
}

// File first, then --set, then dedicated flags, then validation.
RunConfig resolve(const Common& c, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig cfg;
  if (!c.config_file.empty()) cfg.load_file(c.config_file);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  for (const auto& [k, v] : flags) cfg.set(k, v);
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  cfg.validate();
  return cfg;
}

template <typename T>
void flag_if(std::vector<std::pair<std::string, std::string>>& out, const char* key, const std::optional<T>& v) {
  if (!v) return;
  std::ostringstream s;
  s << std::setprecision(17) << *v;
  out.emplace_back(key, s.str());
}

std::vector<std::string> header_lines(const RunConfig& cfg, std::string_view command) {
  auto lines = cfg.provenance(command);
  std::istringstream echo(cfg.echo());
  for (std::string l; std::getline(echo, l);) lines.push_back("config " + l);
  return lines;
}

std::ofstream open_output(const std::string& path, const RunConfig& cfg, std::string_view command) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open output " + path);
  for (const auto& l : header_lines(cfg, command)) out << "# " << l << '\n';
  out << std::setprecision(10);
  return out;
}

struct LoadedModel {
  std::shared_ptr<const Model<float>> model;
  BehaviorVocab vocab;
};

LoadedModel load_model(const std::string& path) {
  auto model = std::make_shared<const Model<float>>(load_params(path));
  return {model, BehaviorVocab::standard(model->config().vocab_size - kNumSpecialIds)};
}

void log(const std::string& msg) { std::cerr << msg << '\n'; }

// ---------------------------------------------------------------------------

struct GenData {
  Common common;
  std::string out;
  std::optional<int> users, length;
  std::optional<double> drift;
};

int run_gen_data(const GenData& a) {
  std::vector<std::pair<std::string, std::string>> f;
  flag_if(f, "data.users", a.users);
  flag_if(f, "data.length", a.length);
  flag_if(f, "data.drift_rate", a.drift);
  const RunConfig cfg = resolve(a.common, f);
  const PersonaSpec spec = make_persona_spec(cfg.persona, cfg.seed);
  const Dataset data = generate_dataset(spec, cfg.users, cfg.length, cfg.seed);
  write_dataset(a.out, data, cfg.vocab(), header_lines(cfg, "gen-data"));
  log("wrote " + std::to_string(data.size()) + " users to " + a.out);
  return 0;
}

struct Train {
  Common common;
  std::string data, out, metrics, checkpoint_dir;
  std::optional<std::string> objective;
  std::optional<int> epochs, window;
};

int run_train(const Train& a) {
  std::vector<std::pair<std::string, std::string>> f;
  flag_if(f, "train.objective", a.objective);
  flag_if(f, "train.epochs", a.epochs);
  flag_if(f, "model.window", a.window);
  RunConfig cfg = resolve(a.common, f);
  const Dataset data = read_dataset(a.data, cfg.vocab());
  cfg.train.seed = cfg.seed;
  if (!a.metrics.empty()) cfg.train.metrics_csv = a.metrics;
  if (!a.checkpoint_dir.empty()) cfg.train.checkpoint_dir = a.checkpoint_dir;
  log("training " + cfg.train.objectives.name() + " on " + std::to_string(data.size()) + " users");
  const TrainResult r = train(data, cfg.model, cfg.train,
                              [](const MetricsRow& m) {
                                if (m.val_loss) {
                                  std::ostringstream s;
                                  s << "epoch " << m.epoch << " step " << m.step << " train " << m.train_loss << " val "
                                    << *m.val_loss;
                                  log(s.str());
                                }
                              },
                              header_lines(cfg, "train"));
  save_params(r.params, a.out);
  log("wrote parameters to " + a.out);
  return 0;
}

struct Embed {
  Common common;
  std::string params, data, out;
};

int run_embed(const Embed& a) {
  const RunConfig cfg = resolve(a.common, {});
  const auto m = load_model(a.params);
  const Dataset data = read_dataset(a.data, m.vocab);
  const Embedder embed = model_embedder(m.model);
  auto out = open_output(a.out, cfg, "embed");
  out << "user_id";
  for (int i = 0; i < m.model->config().hidden_size; ++i) out << ",e" << i;
  out << '\n';
  for (const auto& s : data) {
    const Embedding e = embed(s.ids);
    out << s.user_id;
    for (Index i = 0; i < e.size(); ++i) out << ',' << e(i);
    out << '\n';
  }
  return 0;
}

struct UpdateState {
  Common common;
  std::string params, store, data, strategy = "stateful", out;
};

// The dataset holds each user's new behaviors for this period.
int run_update_state(const UpdateState& a) {
  const RunConfig cfg = resolve(a.common, {});
  UpdateStrategy strategy;
  try {
    strategy = parse_strategy(a.strategy);
  } catch (const Error& e) {
    throw KeyError("--strategy", e.what());
  }
  const auto m = load_model(a.params);
  const Dataset data = read_dataset(a.data, m.vocab);
  StateStore store(a.store);
  std::optional<std::ofstream> out;
  if (!a.out.empty()) {
    out.emplace(open_output(a.out, cfg, "update-state"));
    *out << "user_id,behaviors_seen";
    for (int i = 0; i < m.model->config().hidden_size; ++i) *out << ",e" << i;
    *out << '\n';
  }
  for (const auto& s : data) {
    UserState state = store.contains(s.user_id) ? store.get(s.user_id, m.model->fingerprint())
                                                : init_user(s.user_id, *m.model);
    Embedding e;
    switch (strategy) {
      case UpdateStrategy::Stateful: {
        auto r = update_stateful(state, s.ids, *m.model);
        state = std::move(r.state);
        e = std::move(r.embedding);
        break;
      }
      case UpdateStrategy::PoolEmbeddings: {
        auto r = update_pool(state, s.ids, *m.model);
        state = std::move(r.state);
        e = std::move(r.embedding);
        break;
      }
      case UpdateStrategy::RecentOnly:
        e = update_recent_only(s.ids, *m.model);
        state.behaviors_seen += static_cast<std::int64_t>(s.ids.size());
        state.periods_seen += 1;
        break;
      case UpdateStrategy::RecomputeAll:
        store.append_history(s.user_id, s.ids);
        e = update_recompute_all(store.history(s.user_id), *m.model);
        state.behaviors_seen += static_cast<std::int64_t>(s.ids.size());
        state.periods_seen += 1;
        break;
    }
    store.put(state);
    if (out) {
      *out << s.user_id << ',' << state.behaviors_seen;
      for (Index i = 0; i < e.size(); ++i) *out << ',' << e(i);
      *out << '\n';
    }
  }
  log("updated " + std::to_string(data.size()) + " users with " + a.strategy);
  return 0;
}

struct Eval {
  Common common;
  std::string task, params, data, out, embedder = "use";
  std::optional<int> window, candidates;
};

Embedder pick_embedder(const std::string& name, const LoadedModel* m, int vocab_size, std::uint64_t seed) {
  if (name == "use") {
    if (!m) throw KeyError("--params", "required for the use embedder");
    return model_embedder(m->model);
  }
  if (name == "tf") return tf_embedder(vocab_size);
  if (name == "random") return random_embedder(m ? m->model->config().hidden_size : 32, seed);
  throw KeyError("--embedder", "expected use, tf or random");
}

int run_eval(const Eval& a) {
  std::vector<std::pair<std::string, std::string>> f;
  flag_if(f, "retrieval.window", a.window);
  flag_if(f, "retrieval.candidates", a.candidates);
  const RunConfig cfg = resolve(a.common, f);
  std::optional<LoadedModel> m;
  if (!a.params.empty()) m = load_model(a.params);
  const BehaviorVocab vocab = m ? m->vocab : cfg.vocab();
  const Dataset data = read_dataset(a.data, vocab);
  const Embedder embedder = pick_embedder(a.embedder, m ? &*m : nullptr, vocab.size(), cfg.seed);
  auto out = open_output(a.out, cfg, "eval " + a.task);
  if (a.task == "retrieval") {
    RetrievalOptions ro = cfg.retrieval;
    ro.seed = cfg.seed;
    const RetrievalTask task = build_retrieval_task(data, vocab.size(), ro);
    const RetrievalResult r = run_retrieval(task, embedder);
    out << "embedder,instances,candidates,fallback_instances,mrr,random_baseline\n";
    out << a.embedder << ',' << task.instances.size() << ',' << ro.n_candidates << ',' << task.fallback_instances()
        << ',' << r.mrr << ',' << random_mrr_baseline(ro.n_candidates) << '\n';
    log("mrr " + std::to_string(r.mrr));
  } else {
    FutureBehaviorOptions fo;
    fo.context_len = cfg.retrieval.window_len;
    fo.horizon = cfg.schedule.increment;
    fo.probe = cfg.probe;
    fo.probe.seed = cfg.seed;
    fo.seed = cfg.seed;
    const auto r = future_behavior_task(data, embedder, BehaviorsOfInterest::all_behaviors(vocab.size()), fo);
    out << "embedder,train,val,test,excluded_behaviors,auc\n";
    out << a.embedder << ',' << r.split.train << ',' << r.split.val << ',' << r.split.test << ','
        << r.excluded_behaviors << ',' << r.auc << '\n';
    log("auc " + std::to_string(r.auc));
  }
  return 0;
}

struct Simulate {
  Common common;
  std::string params, data, out;
  std::optional<int> periods;
};

int run_simulate(const Simulate& a) {
  std::vector<std::pair<std::string, std::string>> f;
  flag_if(f, "schedule.periods", a.periods);
  const RunConfig cfg = resolve(a.common, f);
  const auto m = load_model(a.params);
  const Dataset data = read_dataset(a.data, m.vocab);
  SimulationOptions so;
  so.schedule = cfg.schedule;
  so.probe = cfg.probe;
  so.probe.seed = cfg.seed;
  so.probe_user_fraction = cfg.probe_user_fraction;
  so.retrain_probe_per_period = cfg.retrain_probe_per_period;
  so.reid_candidates = cfg.retrieval.n_candidates;
  so.seed = cfg.seed;
  const SimulationResult r = simulate_dynamic(data, *m.model, so);
  auto out = open_output(a.out, cfg, "simulate");
  out << "strategy,period,auc,reid_mrr,period_seconds,cumulative_seconds\n";
  for (const auto& row : r.rows) {
    out << strategy_name(row.strategy) << ',' << row.period << ',' << row.auc << ',' << row.reid_mrr << ','
        << row.period_seconds << ',' << row.cumulative_seconds << '\n';
  }
  return 0;
}

struct Bench {
  Common common;
  std::string params, data, out;
  std::optional<int> periods, users;
};

int run_bench(const Bench& a) {
  std::vector<std::pair<std::string, std::string>> f;
  flag_if(f, "schedule.periods", a.periods);
  flag_if(f, "bench.users", a.users);
  const RunConfig cfg = resolve(a.common, f);
  std::optional<LoadedModel> m;
  if (!a.params.empty()) {
    m = load_model(a.params);
  } else {
    m = LoadedModel{std::make_shared<const Model<float>>(init_parameters<float>(cfg.model, cfg.seed)), cfg.vocab()};
  }
  BenchOptions bo;
  bo.schedule = cfg.schedule;
  bo.num_users = cfg.bench_users;
  bo.repetitions = cfg.bench_repetitions;
  bo.memory_budget_bytes = cfg.memory_budget_mb << 20;
  Dataset data;
  if (!a.data.empty()) {
    data = read_dataset(a.data, m->vocab);
  } else {
    data = generate_dataset(make_persona_spec(cfg.persona, cfg.seed), cfg.bench_users,
                            cfg.schedule.seen_after(cfg.schedule.periods - 1), cfg.seed);
  }
  const auto rows = bench_strategies(*m->model, data, bo);
  auto out = open_output(a.out, cfg, "bench");
  out << "strategy,period,period_seconds,cumulative_seconds\n";
  for (const auto& r : rows) {
    out << strategy_name(r.strategy) << ',' << r.period << ',' << r.period_seconds << ',' << r.cumulative_seconds
        << '\n';
    log(std::string(strategy_name(r.strategy)) + " period " + std::to_string(r.period) + " batch " +
        std::to_string(r.batch_size));
  }
  return 0;
}

struct SweepW {
  Common common;
  std::string data, out;
  std::vector<int> windows{16, 32, 64};
  std::vector<int> lengths{32, 64, 128};
};

// One model per W; the training window grows to 2W when W would not fit.
int run_sweep_w(const SweepW& a) {
  const RunConfig base = resolve(a.common, {});
  const Dataset data = read_dataset(a.data, base.vocab());
  auto out = open_output(a.out, base, "sweep-w");
  out << "w,train_seq_len,input_len,mrr,random_baseline\n";
  for (int w : a.windows) {
    RunConfig cfg = base;
    cfg.set("model.window", std::to_string(w));
    cfg.set("train.seq_len", std::to_string(std::max(cfg.train.seq_len, 2 * w)));
    cfg.validate();
    cfg.train.seed = cfg.seed;
    log("sweep-w: training W=" + std::to_string(w));
    auto model = std::make_shared<const Model<float>>(train(data, cfg.model, cfg.train).params);
    for (int len : a.lengths) {
      RetrievalOptions ro = cfg.retrieval;
      ro.window_len = len;
      ro.seed = cfg.seed;
      const RetrievalResult r = run_retrieval(build_retrieval_task(data, cfg.model.vocab_size, ro), model_embedder(model));
      out << w << ',' << cfg.train.seq_len << ',' << len << ',' << r.mrr << ',' << random_mrr_baseline(ro.n_candidates)
          << '\n';
    }
  }
  return 0;
}

struct InspectState {
  Common common;
  std::string path, store;
  std::optional<std::uint64_t> user;
};

int run_inspect_state(const InspectState& a) {
  resolve(a.common, {});
  UserState s;
  if (!a.path.empty()) {
    s = load_state(a.path);
  } else {
    if (a.store.empty() || !a.user) throw KeyError("--state", "give a state file, or --store with --user");
    s = StateStore(a.store).get(*a.user);
  }
  std::cout << "user_id " << s.user_id << '\n'
            << "fingerprint " << to_hex(s.fingerprint()) << '\n'
            << "behaviors_seen " << s.behaviors_seen << '\n'
            << "periods_seen " << s.periods_seen << '\n'
            << "embedding_dim " << s.running_embedding.size() << '\n'
            << "layers " << s.model.layers.size() << '\n';
  for (std::size_t l = 0; l < s.model.layers.size(); ++l) {
    std::cout << "layer " << l << " heads " << s.model.layers[l].heads.size();
    if (!s.model.layers[l].heads.empty()) {
      const auto& h = s.model.layers[l].heads.front().s;
      std::cout << " state " << h.rows() << 'x' << h.cols();
    }
    std::cout << '\n';
  }
  std::cout << "pooled_periods " << s.period_embeddings.size() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"User sequence embeddings with retention: data, training, state updates and evaluation"};
  app.require_subcommand(1);

  GenData gen;
  auto* c_gen = app.add_subcommand("gen-data", "generate a synthetic behavior corpus");
  add_common(c_gen, gen.common);
  c_gen->add_option("--out", gen.out, "output corpus")->required();
  c_gen->add_option("--users", gen.users);
  c_gen->add_option("--length", gen.length);
  c_gen->add_option("--drift", gen.drift, "per-period drift rate");

  Train tr;
  auto* c_train = app.add_subcommand("train", "train a model");
  add_common(c_train, tr.common);
  c_train->add_option("--data", tr.data)->required()->check(CLI::ExistingFile);
  c_train->add_option("--out", tr.out, "parameter file")->required();
  c_train->add_option("--objective", tr.objective, "use | use-fbp | use-sup | use-clm");
  c_train->add_option("--epochs", tr.epochs);
  c_train->add_option("--window", tr.window, "future window W");
  c_train->add_option("--metrics", tr.metrics, "metrics CSV");
  c_train->add_option("--checkpoint-dir", tr.checkpoint_dir);

  Embed em;
  auto* c_embed = app.add_subcommand("embed", "embed each sequence of a corpus");
  add_common(c_embed, em.common);
  c_embed->add_option("--params", em.params)->required()->check(CLI::ExistingFile);
  c_embed->add_option("--data", em.data)->required()->check(CLI::ExistingFile);
  c_embed->add_option("--out", em.out)->required();

  UpdateState up;
  auto* c_up = app.add_subcommand("update-state", "apply one period of behaviors to a state store");
  add_common(c_up, up.common);
  c_up->add_option("--params", up.params)->required()->check(CLI::ExistingFile);
  c_up->add_option("--store", up.store)->required();
  c_up->add_option("--data", up.data, "corpus of this period's new behaviors")->required()->check(CLI::ExistingFile);
  c_up->add_option("--strategy", up.strategy, "stateful | recent_only | pool_embeddings | recompute_all");
  c_up->add_option("--out", up.out, "embedding CSV");

  Eval ev;
  auto* c_eval = app.add_subcommand("eval", "evaluate embeddings");
  add_common(c_eval, ev.common);
  c_eval->add_option("task", ev.task, "retrieval | fbp")->required()->check(CLI::IsMember({"retrieval", "fbp"}));
  c_eval->add_option("--params", ev.params)->check(CLI::ExistingFile);
  c_eval->add_option("--data", ev.data)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--out", ev.out)->required();
  c_eval->add_option("--embedder", ev.embedder, "use | tf | random");
  c_eval->add_option("--window", ev.window);
  c_eval->add_option("--candidates", ev.candidates);

  Simulate sim;
  auto* c_sim = app.add_subcommand("simulate", "period-by-period update strategy comparison");
  add_common(c_sim, sim.common);
  c_sim->add_option("--params", sim.params)->required()->check(CLI::ExistingFile);
  c_sim->add_option("--data", sim.data)->required()->check(CLI::ExistingFile);
  c_sim->add_option("--out", sim.out)->required();
  c_sim->add_option("--periods", sim.periods);

  Bench be;
  auto* c_bench = app.add_subcommand("bench", "time each update strategy per period");
  add_common(c_bench, be.common);
  c_bench->add_option("--params", be.params)->check(CLI::ExistingFile);
  c_bench->add_option("--data", be.data)->check(CLI::ExistingFile);
  c_bench->add_option("--out", be.out)->required();
  c_bench->add_option("--periods", be.periods);
  c_bench->add_option("--users", be.users);

  SweepW sw;
  auto* c_sweep = app.add_subcommand("sweep-w", "train one model per W and report retrieval per input length");
  add_common(c_sweep, sw.common);
  c_sweep->add_option("--data", sw.data)->required()->check(CLI::ExistingFile);
  c_sweep->add_option("--out", sw.out)->required();
  c_sweep->add_option("--w", sw.windows)->delimiter(',')->check(CLI::PositiveNumber);
  c_sweep->add_option("--lengths", sw.lengths)->delimiter(',')->check(CLI::PositiveNumber);

  InspectState is;
  auto* c_inspect = app.add_subcommand("inspect-state", "print a user state's header fields");
  add_common(c_inspect, is.common);
  c_inspect->add_option("--state", is.path)->check(CLI::ExistingFile);
  c_inspect->add_option("--store", is.store);
  c_inspect->add_option("--user", is.user);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (c_gen->parsed()) return run_gen_data(gen);
    if (c_train->parsed()) return run_train(tr);
    if (c_embed->parsed()) return run_embed(em);
    if (c_up->parsed()) return run_update_state(up);
    if (c_eval->parsed()) return run_eval(ev);
    if (c_sim->parsed()) return run_simulate(sim);
    if (c_bench->parsed()) return run_bench(be);
    if (c_sweep->parsed()) return run_sweep_w(sw);
    if (c_inspect->parsed()) return run_inspect_state(is);
  } catch (const KeyError& e) {
    std::cerr << "error: invalid " << e.key() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
