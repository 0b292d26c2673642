// acestep: data generation, training, sampling, the control suite, checkpoint
// inspection and evaluation. Failures print one `error: kind=... message=...`
// line and exit nonzero.

#include "acceptance_suite.hpp"
#include "acestep/acestep.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace acestep;

namespace {

RunConfig config_from(const std::string& path) { return path.empty() ? RunConfig{} : RunConfig::parse(read_file(path)); }

struct Prompt {
  std::string tags;
  std::string lyrics;
  int speaker = -1;

  void add_to(CLI::App* cmd, const std::string& lyric_flag = "--lyrics") {
    cmd->add_option("--tags", tags, "comma-separated style tags");
    if (!lyric_flag.empty()) cmd->add_option(lyric_flag, lyrics, "lyrics; [verse]/[chorus]/[bridge]/[inst] tags allowed");
    cmd->add_option("--speaker", speaker, "speaker id, -1 for none");
  }

  ConditionBundle bundle(const std::string& text) const {
    std::vector<std::string> warnings;
    ConditionBundle b = make_condition(tags, text, speaker >= 0 ? std::optional<int>(speaker) : std::nullopt, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    return b;
  }
};

struct SamplerFlags {
  long seed = 0;
  int steps = 0;
  double guidance = -1.0;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--seed", seed, "sampling seed");
    cmd->add_option("--steps", steps, "ODE steps (config value when omitted)");
    cmd->add_option("--guidance", guidance, "guidance scale (config value when omitted)");
  }

  SamplerConfig resolve(const RunConfig& rc) const {
    SamplerConfig c = rc.sampler();
    c.seed = static_cast<std::uint64_t>(seed);
    if (steps > 0) c.steps = steps;
    if (guidance >= 0.0) c.guidance_scale = guidance;
    return c;
  }
};

Matrix<float> mel_tokens(const LoadedPipeline& p, const std::string& path) {
  return patchify(p.dcae.encode(pad_to_multiple(load_mel(path))));
}

void write_tokens_as_mel(const LoadedPipeline& p, const Matrix<float>& tokens, const std::string& out) {
  save_mel(out, p.dcae.decode(unpatchify(tokens, p.state.model.config().latent_bins)));
}

VelocityFn pipeline_fn(const LoadedPipeline& p) { return velocity_fn(p.state.model, p.state.adapter()); }

void cmd_gen_data(const std::string& config, const std::string& out) {
  const RunConfig rc = config_from(config);
  fs::create_directories(out);
  const auto corpus = make_corpus(CorpusConfig::from(rc));
  const auto mels = corpus_mels(corpus);
  std::ofstream manifest(fs::path(out) / "manifest.tsv");
  require(manifest.good(), ErrorKind::kIo, "cannot write manifest in '" + out + "'");
  manifest << "file\tduration_s\ttags\tlyrics\tspeaker\n";
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "song_%03zu.acep", i);
    save_mel((fs::path(out) / name).string(), mels[i]);
    manifest << name << "\t" << corpus[i].spec.duration_s << "\t" << corpus[i].tags << "\t" << corpus[i].lyrics << "\t"
             << (corpus[i].spec.speaker_id ? *corpus[i].spec.speaker_id : -1) << "\n";
  }
  std::cout << "wrote " << corpus.size() << " songs to " << out << "\n";
}

void cmd_train_dcae(const std::string& config, const std::string& out) {
  const RunConfig rc = config_from(config);
  const Dcae<float> dcae = run_train_dcae(rc, &std::cout);
  save_container(out, dcae_records(dcae, rc.text()));
  std::cout << "saved " << out << "\n";
}

void cmd_train(const std::string& config, const std::string& dcae_path, const std::string& resume, long steps,
               long log_every, const std::string& out) {
  LoadedPipeline p = [&] {
    if (!resume.empty()) return load_pipeline(resume);
    require(!dcae_path.empty(), ErrorKind::kInvalidArgument, "train needs --dcae or --resume");
    RunConfig rc = config_from(config);
    const auto records = load_container(dcae_path);
    const DcaeConfig built = RunConfig::parse(embedded_config(records)).dcae().model, want = rc.dcae().model;
    require(built.c1 == want.c1 && built.c2 == want.c2 && built.c3 == want.c3, ErrorKind::kConfig,
            "autoencoder checkpoint was built with a different dcae configuration");
    Dcae<float> dcae = load_dcae(records, rc);
    TrainState<float> state = fresh_train_state(rc);
    return LoadedPipeline{std::move(rc), std::move(dcae), std::move(state)};
  }();
  const TrainConfig tc = p.config.train();
  const long last = steps > 0 ? steps : tc.steps;
  const auto items = corpus_items(p.config, p.dcae);
  train(p.state, items, tc, last, [&](const StepMetrics& m) {
    if (log_every > 0 && m.step % log_every == 0) std::cout << m.to_line() << "\n";
  });
  save_pipeline(out, p.dcae, p.state, p.config.text());
  std::cout << "saved " << out << " at step " << p.state.step << "\n";
}

void cmd_sample(const std::string& ckpt, const Prompt& prompt, double duration, const SamplerFlags& sf,
                const std::string& out) {
  const LoadedPipeline p = load_pipeline(ckpt);
  const MelSpectrogram mel = generate(p.state.model, p.dcae, prompt.bundle(prompt.lyrics), duration, sf.resolve(p.config),
                                      p.state.adapter());
  save_mel(out, mel);
  std::cout << "wrote " << out << " (" << mel.frames() << " mel frames)\n";
}

std::pair<double, double> parse_span(const std::string& text) {
  const auto dots = text.find("..");
  require(dots != std::string::npos, ErrorKind::kInvalidArgument, "span must look like start..end, got '" + text + "'");
  try {
    return {std::stod(text.substr(0, dots)), std::stod(text.substr(dots + 2))};
  } catch (const std::exception&) {
    throw Error(ErrorKind::kInvalidArgument, "span must look like start..end, got '" + text + "'");
  }
}

void cmd_repaint(const std::string& ckpt, const std::string& in, const std::string& span, const Prompt& prompt,
                 const SamplerFlags& sf, const std::string& out) {
  const LoadedPipeline p = load_pipeline(ckpt);
  const Matrix<float> x = mel_tokens(p, in);
  const auto [start, end] = parse_span(span);
  const auto keep = repaint_mask(start, end, x.rows());
  write_tokens_as_mel(p, repaint(pipeline_fn(p), x, keep, prompt.bundle(prompt.lyrics), sf.resolve(p.config)), out);
  std::cout << "wrote " << out << "\n";
}

void cmd_variate(const std::string& ckpt, double ratio, long variation_seed, double duration, const Prompt& prompt,
                 const SamplerFlags& sf, const std::string& out) {
  const LoadedPipeline p = load_pipeline(ckpt);
  const SamplerConfig sc = sf.resolve(p.config);
  const Matrix<float> z = initial_noise(latent_frames_for(duration), p.state.model.config().token_dim(), sc.seed);
  Rng rng(derive_seed(static_cast<std::uint64_t>(variation_seed), 0x7a71));
  write_tokens_as_mel(p, ode_sample(pipeline_fn(p), variation_noise(z, ratio, rng), prompt.bundle(prompt.lyrics), sc), out);
  std::cout << "wrote " << out << "\n";
}

void cmd_edit(const std::string& ckpt, const std::string& in, const Prompt& prompt, const std::string& src,
              const std::string& tgt, const SamplerFlags& sf, const std::string& out) {
  const LoadedPipeline p = load_pipeline(ckpt);
  const Matrix<float> x = mel_tokens(p, in);
  write_tokens_as_mel(p, flow_edit(pipeline_fn(p), x, prompt.bundle(src), prompt.bundle(tgt), sf.resolve(p.config)), out);
  std::cout << "wrote " << out << "\n";
}

void cmd_inspect(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 8) {
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    const bool ok = stored == crc32_of(bytes, bytes.size() - 4);
    std::printf("file %s: %zu bytes, crc32 %08x %s\n", path.c_str(), bytes.size(), stored, ok ? "ok" : "MISMATCH");
  }
  const auto records = decode_container(bytes);
  std::size_t total = 0;
  for (const auto& r : records) {
    std::string dims;
    for (auto d : r.dims) dims += (dims.empty() ? "" : "x") + std::to_string(d);
    std::printf("%-48s %-14s %10zu\n", r.name.c_str(), dims.c_str(), r.numel());
    total += r.numel();
  }
  std::printf("%zu tensors, %zu values\n", records.size(), total);
}

int cmd_eval(const std::string& ckpt, const std::string& suite, const std::string& workdir, const std::string& self) {
  fs::create_directories(workdir);
  std::vector<acceptance::Result> results;
  const bool all = suite == "all";
  const RunConfig rc = ckpt.empty() ? RunConfig{} : load_pipeline(ckpt).config;
  if (all || suite == "geometry") results.push_back(acceptance::geometry(rc));
  if (all || suite == "flow") results.push_back(acceptance::flow_identities());
  if (all || suite == "grad") results.push_back(acceptance::gradient_checks());
  if (suite == "overfit") {
    acceptance::OverfitArtifacts art;
    results.push_back(acceptance::overfit(rc, workdir, art, std::cerr));
  }
  if (suite == "control" || suite == "localization") {
    require(!ckpt.empty(), ErrorKind::kInvalidArgument, "suite '" + suite + "' needs --ckpt");
    const LoadedPipeline p = load_pipeline(ckpt);
    if (suite == "control") {
      results.push_back(acceptance::control_suite(p.state.model, corpus_items(p.config, p.dcae), p.config.sampler()));
    } else {
      const auto rep = evaluate_localization(p.state.model, p.dcae, held_out_prompts(CorpusConfig::from(p.config), 8),
                                             p.config.sampler());
      std::printf("held-out localization %.4f\n", rep.mean);
      return 0;
    }
  }
  if (all || suite == "stats") results.push_back(acceptance::statistics(rc));
  if (all || suite == "scaling") results.push_back(acceptance::attention_scaling());
  if (all || suite == "repro") results.push_back(acceptance::reproducibility(self, workdir));
  require(!results.empty(), ErrorKind::kInvalidArgument, "unknown suite '" + suite + "'");
  int failed = 0;
  for (const auto& r : results) {
    std::cout << r.line() << "\n";
    failed += !r.pass;
  }
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale text-to-music latent diffusion"};
  app.require_subcommand(1);

  std::string config, out, ckpt, in, dcae, resume, span, workdir = "eval_work", suite = "all";
  std::string lyrics_src, lyrics_tgt;
  long steps = 0, log_every = 100, variation_seed = 1;
  double duration = 2.97, ratio = 0.5;
  Prompt prompt;
  SamplerFlags sf;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic corpus as mel files plus a manifest");
  gen->add_option("--config", config);
  gen->add_option("--out", out)->required();

  auto* tdc = app.add_subcommand("train-dcae", "train the autoencoder on the synthetic corpus");
  tdc->add_option("--config", config);
  tdc->add_option("--out", out)->required();

  auto* tr = app.add_subcommand("train", "train the denoiser, or resume a checkpoint");
  tr->add_option("--config", config);
  tr->add_option("--dcae", dcae, "autoencoder checkpoint");
  tr->add_option("--resume", resume, "pipeline checkpoint to continue");
  tr->add_option("--steps", steps, "stop at this step (config train.steps when omitted)");
  tr->add_option("--log-every", log_every);
  tr->add_option("--out", out)->required();

  auto* smp = app.add_subcommand("sample", "generate a mel from tags and lyrics");
  smp->add_option("--ckpt", ckpt)->required();
  prompt.add_to(smp);
  smp->add_option("--duration", duration, "seconds");
  sf.add_to(smp);
  smp->add_option("--out", out)->required();

  auto* rp = app.add_subcommand("repaint", "regenerate a time span of an existing mel");
  rp->add_option("--ckpt", ckpt)->required();
  rp->add_option("--in", in)->required();
  rp->add_option("--span", span, "start_s..end_s")->required();
  prompt.add_to(rp);
  sf.add_to(rp);
  rp->add_option("--out", out)->required();

  auto* var = app.add_subcommand("variate", "sample a variation of the generation from --seed");
  var->add_option("--ckpt", ckpt)->required();
  var->add_option("--ratio", ratio, "0 reproduces the original, 1 is independent");
  var->add_option("--variation-seed", variation_seed);
  var->add_option("--duration", duration, "seconds");
  prompt.add_to(var);
  sf.add_to(var);
  var->add_option("--out", out)->required();

  auto* ed = app.add_subcommand("edit", "change the lyrics of an existing mel");
  ed->add_option("--ckpt", ckpt)->required();
  ed->add_option("--in", in)->required();
  prompt.add_to(ed, "");
  ed->add_option("--lyrics-src", lyrics_src)->required();
  ed->add_option("--lyrics-tgt", lyrics_tgt)->required();
  sf.add_to(ed);
  ed->add_option("--out", out)->required();

  auto* ins = app.add_subcommand("inspect", "list the tensors of a container and check its CRC");
  ins->add_option("--ckpt", ckpt)->required();

  auto* ev = app.add_subcommand("eval", "run acceptance suites");
  ev->add_option("--ckpt", ckpt);
  ev->add_option("--suite", suite, "all|geometry|flow|grad|overfit|control|localization|stats|scaling|repro");
  ev->add_option("--workdir", workdir);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) cmd_gen_data(config, out);
    if (tdc->parsed()) cmd_train_dcae(config, out);
    if (tr->parsed()) cmd_train(config, dcae, resume, steps, log_every, out);
    if (smp->parsed()) cmd_sample(ckpt, prompt, duration, sf, out);
    if (rp->parsed()) cmd_repaint(ckpt, in, span, prompt, sf, out);
    if (var->parsed()) cmd_variate(ckpt, ratio, variation_seed, duration, prompt, sf, out);
    if (ed->parsed()) cmd_edit(ckpt, in, prompt, lyrics_src, lyrics_tgt, sf, out);
    if (ins->parsed()) cmd_inspect(ckpt);
    if (ev->parsed()) return cmd_eval(ckpt, suite, workdir, fs::canonical("/proc/self/exe").string());
  } catch (const Error& e) {
    std::cout << "error: kind=" << to_string(e.kind()) << " message=" << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cout << "error: kind=io message=" << e.what() << std::endl;
    return 2;
  }
  return 0;
}
