// Autoencoder, condition encoders, the DiT and LoRA.

#include "acestep/dcae.hpp"
#include "acestep/dit.hpp"
#include "acestep/model.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

namespace acestep {
namespace {

using testing::gradcheck;

template <typename F>
ErrorKind error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kIo;
}

SongSpec song(double duration, const std::string& lyrics, std::optional<int> speaker = 0, int tag = 2) {
  SongSpec s;
  s.duration_s = duration;
  s.tag_id = tag;
  s.lyrics = tokenize_lyrics(lyrics);
  s.speaker_id = speaker;
  s.seed = 99;
  return s;
}

// Sets every entry, trainable or not, to fresh random values so zero-initialized
// heads do not hide gradient paths.
template <typename T>
void randomize(ParamStore<T>& store, std::uint64_t seed, double stddev = 0.4) {
  Rng rng(seed);
  for (auto& e : store) init_normal(e.value, rng, stddev);
}

// ---------------------------------------------------------------------------
// Synthetic mel and autoencoder geometry

TEST(SynthMel, Deterministic) {
  const SongSpec s = song(2.97, "ab c");
  EXPECT_EQ(synth_mel(s).data, synth_mel(s).data);
}

TEST(SynthMel, InstrumentalHasNoVocalBand) {
  const MelSpectrogram mel = synth_mel(song(2.0, "[inst]", std::nullopt));
  EXPECT_EQ(mel.data.rightCols(kMelBins - kVocalBandStart).maxCoeff(), 0.0f);
  EXPECT_GT(mel.data.leftCols(kVocalBandStart).maxCoeff(), 0.0f);
}

TEST(SynthMel, BurstsSitInTheirSlots) {
  const MelSpectrogram mel = synth_mel(song(2.97, "a b"));
  const auto env = vocal_envelope(mel);
  const Index a = VocalLayout::kLeadIn + VocalLayout::kSlot / 2;
  const Index gap = VocalLayout::kLeadIn + VocalLayout::kSlot + VocalLayout::kSlot / 2;
  const Index b = VocalLayout::kLeadIn + 2 * VocalLayout::kSlot + VocalLayout::kSlot / 2;
  EXPECT_GT(env[a], 0.01);
  EXPECT_EQ(env[gap], 0.0);
  EXPECT_GT(env[b], 0.01);
}

TEST(SynthMel, ValuesInUnitRangeAndPadded) {
  const MelSpectrogram mel = synth_mel(song(11.88, "hello"));
  EXPECT_EQ(mel.frames(), 1024);
  EXPECT_EQ(mel.valid_frames, 1023);
  EXPECT_GE(mel.data.minCoeff(), 0.0f);
  EXPECT_LE(mel.data.maxCoeff(), 1.0f);
}

TEST(SynthMel, TooShortForLyricsIsAnError) {
  EXPECT_EQ(error_of([] { synth_mel(song(0.5, "abcdefgh")); }), ErrorKind::kInvalidArgument);
}

TEST(Dcae, EncodeGeometry) {
  Dcae<float> m(DcaeConfig{}, 1);
  MelSpectrogram mel;
  mel.data = Matrix<float>::Constant(1024, 128, 0.25f);
  const Latent z = m.encode(mel);
  EXPECT_EQ(z.channels(), 8);
  EXPECT_EQ(z.freq, 16);
  EXPECT_EQ(z.time, 128);
  EXPECT_NEAR(z.latent_rate_hz, 10.77, 0.01);
  const MelSpectrogram back = m.decode(z);
  EXPECT_EQ(back.frames(), 1024);
  EXPECT_EQ(back.bins(), 128);
}

TEST(Dcae, SmallestLegalInput) {
  Dcae<float> m(DcaeConfig{4, 4, 4}, 1);
  MelSpectrogram mel;
  mel.data = Matrix<float>::Constant(8, 8, 0.5f);
  const Latent z = m.encode(mel);
  EXPECT_EQ(z.data.rows(), 8);
  EXPECT_EQ(z.freq, 1);
  EXPECT_EQ(z.time, 1);
}

TEST(Dcae, UnpaddedInputIsRejected) {
  Dcae<float> m(DcaeConfig{4, 4, 4}, 1);
  MelSpectrogram mel;
  mel.data = Matrix<float>::Zero(12, 8);
  try {
    m.encode(mel);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kShapeMismatch);
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
  EXPECT_EQ(pad_to_multiple(mel).frames(), 16);
}

TEST(Dcae, DecodeNeedsEightChannels) {
  Dcae<float> m(DcaeConfig{4, 4, 4}, 1);
  Latent z;
  z.data = Matrix<float>::Zero(4, 1);
  z.freq = z.time = 1;
  EXPECT_EQ(error_of([&] { m.decode(z); }), ErrorKind::kShapeMismatch);
}

TEST(Dcae, ZeroLatentDecodesToFiniteBiasImage) {
  Dcae<float> m(DcaeConfig{4, 4, 4}, 3);
  Latent z;
  z.data = Matrix<float>::Zero(8, 4);
  z.freq = 2;
  z.time = 2;
  const MelSpectrogram a = m.decode(z), b = m.decode(z);
  EXPECT_TRUE(a.data.allFinite());
  EXPECT_EQ(a.data, b.data);
}

TEST(Dcae, LatentRateMatchesDuration) {
  for (double d : {2.0, 11.88, 30.0, 240.0}) {
    const Index t_lat = padded_frames(mel_frames_for(d)) / kCompression;
    EXPECT_LE(std::abs(kMelFrameRateHz / kCompression * d - static_cast<double>(t_lat)), 1.0) << d;
  }
}

TEST(Dcae, ReconstructionGradientMatchesFiniteDifferences) {
  Dcae<double> m(DcaeConfig{2, 3, 3}, 5);
  randomize(m.params, 8, 0.5);
  m.params.at("dcae.latent_std").array() = m.params.at("dcae.latent_std").array().abs() + 0.5;
  std::vector<MelSpectrogram> batch;
  Rng rng(4);
  for (int i = 0; i < 4; ++i) {
    MelSpectrogram mel;
    mel.data = rng.normal_matrix<float>(16, 16);
    batch.push_back(mel);
  }
  auto rep = gradcheck(m.params, [&](Tape<double>& t) {
    Var<double> l = reconstruction_mse(t, m, batch[0]);
    for (std::size_t i = 1; i < batch.size(); ++i) l = l + reconstruction_mse(t, m, batch[i]);
    return l;
  });
  EXPECT_TRUE(rep.ok) << rep.first_failure;
  EXPECT_GT(rep.checked, 200u);
}

TEST(Dcae, ZeroLearningRateKeepsInitialParameters) {
  std::vector<MelSpectrogram> data{pad_to_multiple(synth_mel(song(0.5, "")))};
  DcaeTrainConfig cfg;
  cfg.model = DcaeConfig{4, 4, 4};
  cfg.steps = 3;
  cfg.lr = 0.0;
  auto r = train_dcae<float>(data, cfg);
  Dcae<float> fresh(cfg.model, cfg.seed);
  for (const auto& e : fresh.params)
    if (e.trainable) {
      EXPECT_EQ(r.model.params.at(e.name), e.value) << e.name;
    }
}

TEST(Dcae, SameSeedSameParameters) {
  std::vector<MelSpectrogram> data{pad_to_multiple(synth_mel(song(0.5, ""))), pad_to_multiple(synth_mel(song(0.6, "", 1, 3)))};
  DcaeTrainConfig cfg;
  cfg.model = DcaeConfig{4, 4, 4};
  cfg.steps = 5;
  auto a = train_dcae<float>(data, cfg), b = train_dcae<float>(data, cfg);
  EXPECT_TRUE(a.model.params == b.model.params);
  EXPECT_EQ(a.mse, b.mse);
}

TEST(Dcae, EmptyDatasetRejected) {
  EXPECT_EQ(error_of([] { train_dcae<float>({}, DcaeTrainConfig{}); }), ErrorKind::kInvalidArgument);
}

// ---------------------------------------------------------------------------
// Conditioning

double cosine(const Eigen::RowVectorXf& a, const Eigen::RowVectorXf& b) { return a.dot(b) / (a.norm() * b.norm()); }

TEST(TextEmbedding, FrozenDeterministicAndWide) {
  const Matrix<float> a = embed_text("pop, metal"), b = embed_text("pop, metal");
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.rows(), 2);
  EXPECT_EQ(a.cols(), 768);
  EXPECT_LT(std::abs(cosine(embed_text("pop").row(0), embed_text("metal").row(0))), 0.5);
}

TEST(TextEmbedding, BudgetEnforced) {
  std::string tags;
  for (int i = 0; i < 257; ++i) tags += "t" + std::to_string(i) + " ";
  EXPECT_EQ(error_of([&] { embed_text(tags); }), ErrorKind::kBudgetExceeded);
  EXPECT_EQ(embed_text("").rows(), 0);
}

ConditionConfig micro_cond() { return ConditionConfig{8, 2, 1, 2, 10000.0}; }

TEST(LyricEncoder, OutputLengthAndUnusedRowsGetNoGradient) {
  ConditionEncoder<double> enc(micro_cond());
  ParamStore<double> p;
  Rng rng(1);
  enc.init(p, rng);
  const LyricTokens toks = tokenize_lyrics("[chorus]ab");
  Tape<double> t;
  Var<double> out = enc.lyric_encode(t, WeightSource<double>{&p}, toks);
  EXPECT_EQ(out.rows(), static_cast<Index>(toks.size()));
  Rng r(9);
  t.backward(sum(out * t.constant(r.normal_matrix<double>(out.rows(), out.cols()))));
  const Matrix<double>& g = *t.grad(p.at("cond.lyric.embed"));
  for (int id = 0; id < kLyricVocabSize; ++id) {
    const bool used = std::find(toks.ids.begin(), toks.ids.end(), id) != toks.ids.end();
    if (used) {
      EXPECT_GT(g.row(id).norm(), 0.0) << id;
    } else {
      EXPECT_EQ(g.row(id).norm(), 0.0) << id;
    }
  }
}

TEST(LyricEncoder, GradientMatchesFiniteDifferences) {
  ConditionEncoder<double> enc(ConditionConfig{8, 2, 2, 2, 10000.0});
  ParamStore<double> p;
  Rng rng(2);
  enc.init(p, rng);
  randomize(p, 3);
  const LyricTokens toks = tokenize_lyrics("[verse]abcd");  // 6 tokens with BOS/EOS
  ASSERT_EQ(toks.size(), 7u);
  LyricTokens six = toks;
  six.ids.erase(six.ids.begin() + 1);
  auto rep = gradcheck(p, [&](Tape<double>& t) {
    Var<double> y = enc.lyric_encode(t, WeightSource<double>{&p}, six);
    Rng r(7);
    return sum(y * t.constant(r.normal_matrix<double>(y.rows(), y.cols())));
  });
  EXPECT_TRUE(rep.ok) << rep.first_failure;
}

TEST(LyricEncoder, PadTokensAreMasked) {
  ConditionEncoder<double> enc(micro_cond());
  ParamStore<double> p;
  Rng rng(3);
  enc.init(p, rng);
  LyricTokens plain = tokenize_lyrics("abc");
  LyricTokens padded = plain;
  padded.ids.insert(padded.ids.end(), 3, kTokPad);
  Tape<double> t(false);
  const Matrix<double> a = enc.lyric_encode(t, WeightSource<double>{&p}, plain).value();
  const Matrix<double> b = enc.lyric_encode(t, WeightSource<double>{&p}, padded).value();
  ASSERT_EQ(b.rows(), a.rows() + 3);
  EXPECT_LT((b.topRows(a.rows()) - a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Speaker, AbsentIsZeroAndKnownIsStable) {
  ConditionEncoder<float> enc(ConditionConfig{});
  ParamStore<float> p;
  Rng rng(4);
  enc.init(p, rng);
  const Matrix<float> none = ConditionEncoder<float>::speaker_embed(p, std::nullopt);
  EXPECT_EQ(none.cols(), 512);
  EXPECT_EQ(none.cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_EQ(ConditionEncoder<float>::speaker_embed(p, 0), ConditionEncoder<float>::speaker_embed(p, 0));
  EXPECT_EQ(ConditionEncoder<float>::speaker_embed(p, 0).cols(), 512);
  EXPECT_EQ(error_of([&] { ConditionEncoder<float>::speaker_embed(p, 9); }), ErrorKind::kUnknownSpeaker);
}

TEST(Speaker, UnknownIdFailsInsideEncode) {
  ConditionEncoder<float> enc(ConditionConfig{});
  ParamStore<float> p;
  Rng rng(4);
  enc.init(p, rng);
  Tape<float> t(false);
  EXPECT_EQ(error_of([&] { enc.encode(t, WeightSource<float>{&p}, make_condition("pop", "a", 17), 4.0); }),
            ErrorKind::kUnknownSpeaker);
}

TEST(Dropout, ZeroRatesLeaveBundleAndOneRatesNullEverything) {
  const ConditionBundle b = make_condition("pop", "ab", 1);
  Rng r1(1), r2(1);
  const ConditionBundle same = apply_condition_dropout(b, r1, DropoutRates{0, 0, 0, 0});
  EXPECT_EQ(same.dropped, DropFlags{});
  EXPECT_EQ(same.text_emb, b.text_emb);
  EXPECT_EQ(same.lyrics, b.lyrics);
  const ConditionBundle none = apply_condition_dropout(b, r2, DropoutRates{1, 1, 1, 1});
  EXPECT_EQ(none.dropped, unconditional(b).dropped);
  EXPECT_FALSE(none.text_active() || none.lyric_active() || none.speaker_active());
}

TEST(Dropout, OmitSpeakerForcesZeroVector) {
  const ConditionBundle b = make_condition("pop", "ab", 1);
  Rng r(5);
  const ConditionBundle c = apply_condition_dropout(b, r, DropoutRates{0, 0, 0, 0}, true);
  EXPECT_FALSE(c.speaker_active());
  EXPECT_TRUE(c.text_active());
  EXPECT_TRUE(c.lyric_active());
}

TEST(Dropout, SpeakerRateOverTenThousandDraws) {
  const ConditionBundle b = make_condition("pop", "ab", 1);
  Rng r(123);
  int n_speaker = 0, n_global = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto c = apply_condition_dropout(b, r, DropoutRates{});
    n_global += c.dropped.global;
    // The speaker draw is observable only where the global drop missed.
    if (!c.dropped.global) n_speaker += c.dropped.speaker;
  }
  const double n = 10000 - n_global;
  const double rate = n_speaker / n;
  EXPECT_LE(std::abs(rate - 0.5), 2.576 * std::sqrt(0.25 / n));
  EXPECT_LE(std::abs(n_global / 10000.0 - 0.15), 2.576 * std::sqrt(0.15 * 0.85 / 10000.0));
}

TEST(Dropout, PureFunctionOfRngState) {
  const ConditionBundle b = make_condition("pop", "ab", 1);
  Rng r1(77), r2(77);
  for (int i = 0; i < 50; ++i)
    EXPECT_EQ(apply_condition_dropout(b, r1, DropoutRates{}).dropped, apply_condition_dropout(b, r2, DropoutRates{}).dropped);
}

TEST(ConditionEncode, NullFormMatchesTrainingDrop) {
  ConditionEncoder<float> enc(ConditionConfig{});
  ParamStore<float> p;
  Rng rng(6);
  enc.init(p, rng);
  const ConditionBundle b = make_condition("pop rock", "[verse]la", 2);
  Rng r(1);
  const ConditionBundle dropped = apply_condition_dropout(b, r, DropoutRates{1, 0, 0, 0});
  Tape<float> t(false);
  const auto a = enc.encode(t, WeightSource<float>{&p}, unconditional(b), 4.0);
  const auto c = enc.encode(t, WeightSource<float>{&p}, dropped, 4.0);
  EXPECT_EQ(a.sequence.value(), c.sequence.value());
  EXPECT_EQ(a.positions, c.positions);
  // text null, lyric null, zero speaker
  ASSERT_EQ(a.sequence.rows(), 3);
  EXPECT_EQ(a.sequence.value().row(2).cwiseAbs().maxCoeff(), 0.0f);
}

TEST(ConditionEncode, LyricKeysCarryScaledPositions) {
  ConditionEncoder<float> enc(ConditionConfig{});
  ParamStore<float> p;
  Rng rng(6);
  enc.init(p, rng);
  Tape<float> t(false);
  const auto e = enc.encode(t, WeightSource<float>{&p}, make_condition("pop", "ab", std::nullopt), 4.0);
  // [pop] [BOS a b EOS] [speaker]
  EXPECT_EQ(e.positions, (std::vector<float>{0, 0, 4, 8, 12, 0}));
  EXPECT_EQ(e.sequence.value().row(5).cwiseAbs().maxCoeff(), 0.0f);
}

// ---------------------------------------------------------------------------
// Patchification and attention

TEST(Patchify, GeometryAndRoundTrip) {
  Rng rng(1);
  Latent z;
  z.freq = 16;
  z.time = 128;
  z.data = rng.normal_matrix<float>(8, 16 * 128);
  const Matrix<float> tok = patchify(z);
  EXPECT_EQ(tok.rows(), 128);
  EXPECT_EQ(tok.cols(), 128);
  const Latent back = unpatchify(tok, 16);
  EXPECT_EQ(back.data, z.data);
  EXPECT_EQ(back.time, 128);

  Latent one;
  one.freq = one.time = 1;
  one.data = rng.normal_matrix<float>(8, 1);
  EXPECT_EQ(patchify(one).rows(), 1);
}

TEST(Patchify, TokenBudgetCoversFourMinutes) {
  EXPECT_NEAR(kMaxLatentFrames / (kMelFrameRateHz / kCompression), 240.0, 0.1);
}

TEST(LinearAttention, SingleTokenReturnsValue) {
  Rng rng(2);
  const Matrix<double> q = rng.normal_matrix<double>(1, 4), k = rng.normal_matrix<double>(1, 4),
                       v = rng.normal_matrix<double>(1, 3);
  const Matrix<double> out = linear_attention(q, k, v);
  // phi(q).phi(k) / (phi(q).phi(k) + eps): equal to v up to the eps guard.
  EXPECT_LT((out - v).cwiseAbs().maxCoeff(), 1e-5 * v.cwiseAbs().maxCoeff());
}

TEST(LinearAttention, MatchesBruteForce) {
  Rng rng(3);
  const Matrix<double> q = rng.normal_matrix<double>(7, 4), k = rng.normal_matrix<double>(7, 4),
                       v = rng.normal_matrix<double>(7, 5);
  EXPECT_LT((linear_attention(q, k, v) - testing::brute_linear_attention(q, k, v, kLinearAttentionEps)).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(LinearAttention, PermutationEquivariant) {
  Rng rng(4);
  const Matrix<double> q = rng.normal_matrix<double>(5, 4), k = rng.normal_matrix<double>(5, 4),
                       v = rng.normal_matrix<double>(5, 4);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(5);
  perm.indices() << 3, 0, 4, 1, 2;
  const Matrix<double> a = perm * linear_attention(q, k, v);
  const Matrix<double> b = linear_attention<double>(perm * q, perm * k, perm * v);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LinearAttention, GraphVersionMatchesKernelPerHead) {
  Rng rng(5);
  const Matrix<double> q = rng.normal_matrix<double>(6, 8), k = rng.normal_matrix<double>(6, 8),
                       v = rng.normal_matrix<double>(6, 8);
  Tape<double> t(false);
  const Matrix<double> out = linear_attention(t.constant(q), t.constant(k), t.constant(v), 2).value();
  for (int h = 0; h < 2; ++h) {
    const Matrix<double> ref = linear_attention<double>(q.middleCols(4 * h, 4), k.middleCols(4 * h, 4), v.middleCols(4 * h, 4));
    EXPECT_LT((out.middleCols(4 * h, 4) - ref).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(LinearAttention, GraphGradientWithRotaryPhases) {
  Rng rng(6);
  ParamStore<double> s;
  init_normal(s.add("q", 5, 8), rng, 1.0);
  init_normal(s.add("k", 5, 8), rng, 1.0);
  init_normal(s.add("v", 5, 8), rng, 1.0);
  const std::vector<double> pos{0, 1, 2, 3, 4};
  auto rep = gradcheck(s, [&](Tape<double>& t) {
    Var<double> y = linear_attention(t.param(s.at("q")), t.param(s.at("k")), t.param(s.at("v")), 2, &pos);
    Rng r(8);
    return sum(y * t.constant(r.normal_matrix<double>(5, 8)));
  });
  EXPECT_TRUE(rep.ok) << rep.first_failure;
}

// ---------------------------------------------------------------------------
// DiT

DitConfig micro_dit(int blocks = 2) {
  DitConfig c;
  c.latent_bins = 1;
  c.model_dim = 8;
  c.blocks = blocks;
  c.heads = 2;
  c.ffn_expansion = 2;
  c.time_freq_dim = 8;
  c.cond = micro_cond();
  return c;
}

TEST(Dit, FreshModelPredictsZeroVelocity) {
  LinearDit<float> dit(DitConfig{});
  ParamStore<float> p;
  Rng rng(1);
  dit.init(p, rng);
  Rng data(2);
  const Matrix<float> x = data.normal_matrix<float>(12, 128);
  Tape<float> t(false);
  const auto out = dit.forward(t, WeightSource<float>{&p}, x, 0.4, make_condition("pop", "ab", 0));
  EXPECT_EQ(out.velocity.rows(), 12);
  EXPECT_EQ(out.velocity.cols(), 128);
  EXPECT_EQ(out.velocity.value().cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_EQ(out.hidden.size(), 8u);
}

TEST(Dit, DeterministicAndShapePreserving) {
  LinearDit<double> dit(micro_dit());
  ParamStore<double> p;
  Rng rng(1);
  dit.init(p, rng);
  randomize(p, 2);
  const ConditionBundle c = make_condition("pop", "[verse]ab", 1);
  for (Index len : {1, 3, 9}) {
    Rng data(static_cast<std::uint64_t>(len));
    const Matrix<double> x = data.normal_matrix<double>(len, 8);
    Tape<double> t1(false), t2(false);
    const Matrix<double> a = dit.forward(t1, WeightSource<double>{&p}, x, 0.3, c).velocity.value();
    const Matrix<double> b = dit.forward(t2, WeightSource<double>{&p}, x, 0.3, c).velocity.value();
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.rows(), len);
    EXPECT_EQ(a.cols(), 8);
  }
}

TEST(Dit, GradientMatchesFiniteDifferences) {
  LinearDit<double> dit(micro_dit());
  ParamStore<double> p;
  Rng rng(3);
  dit.init(p, rng);
  randomize(p, 4, 0.3);
  Rng data(5);
  const Matrix<double> x = data.normal_matrix<double>(4, 8);
  const ConditionBundle c = make_condition("pop rock", "[verse]ab", 1);
  auto rep = gradcheck(p, [&](Tape<double>& t) {
    return sum(square(dit.forward(t, WeightSource<double>{&p}, x, 0.37, c).velocity));
  });
  EXPECT_TRUE(rep.ok) << rep.first_failure;
  EXPECT_GT(rep.checked, 1000u);
}

TEST(Dit, BudgetsAndTimestepRange) {
  LinearDit<float> dit(DitConfig{});
  ParamStore<float> p;
  Rng rng(1);
  dit.init(p, rng);
  const ConditionBundle c = make_condition("pop", "", std::nullopt);
  Tape<float> t(false);
  const WeightSource<float> w{&p};
  EXPECT_EQ(error_of([&] { dit.forward(t, w, Matrix<float>::Zero(kMaxLatentFrames + 1, 128), 0.5, c); }),
            ErrorKind::kBudgetExceeded);
  EXPECT_EQ(error_of([&] { dit.forward(t, w, Matrix<float>::Zero(0, 128), 0.5, c); }), ErrorKind::kBudgetExceeded);
  EXPECT_EQ(error_of([&] { dit.forward(t, w, Matrix<float>::Zero(4, 64), 0.5, c); }), ErrorKind::kShapeMismatch);
  EXPECT_EQ(error_of([&] { dit.forward(t, w, Matrix<float>::Zero(4, 128), 1.5, c); }), ErrorKind::kInvalidArgument);
  ConditionBundle long_text = c;
  long_text.text_emb = Matrix<float>::Zero(kMaxTextTokens + 1, kTextDim);
  EXPECT_EQ(error_of([&] { dit.forward(t, w, Matrix<float>::Zero(4, 128), 0.5, long_text); }), ErrorKind::kBudgetExceeded);
  ConditionBundle long_lyrics = c;
  long_lyrics.lyrics.ids.assign(kMaxLyricTokens + 1, 'a');
  EXPECT_EQ(error_of([&] { dit.forward(t, w, Matrix<float>::Zero(4, 128), 0.5, long_lyrics); }),
            ErrorKind::kBudgetExceeded);
}

TEST(Dit, RepaTapScalesWithDepth) {
  DitConfig c;
  c.blocks = 24;
  EXPECT_EQ(c.repa_tap(), 8);
  c.blocks = 8;
  EXPECT_EQ(c.repa_tap(), 3);
  c.blocks = 1;
  EXPECT_EQ(c.repa_tap(), 1);
}

TEST(AdaLnSingle, OneSharedNetworkPlusOffsets) {
  auto count = [](int blocks) {
    LinearDit<float> dit(micro_dit(blocks));
    ParamStore<float> p;
    Rng rng(1);
    dit.init(p, rng);
    return modulation_param_count(p);
  };
  const std::size_t per_offset = 6 * 8;
  const std::size_t one = count(1);
  for (int n : {2, 5, 8}) {
    EXPECT_EQ(count(n), one + static_cast<std::size_t>(n - 1) * per_offset);
    EXPECT_LT(count(n), static_cast<std::size_t>(n) * one);
  }
  LinearDit<float> dit(micro_dit(3));
  ParamStore<float> p;
  Rng rng(1);
  dit.init(p, rng);
  int shared = 0;
  for (const auto& e : p) shared += e.name == "dit.adaln.w";
  EXPECT_EQ(shared, 1);
}

TEST(AdaLnSingle, ZeroOffsetsGiveIdenticalModulation) {
  LinearDit<float> dit(micro_dit(4));
  ParamStore<float> p;
  Rng rng(1);
  dit.init(p, rng);
  init_normal(p.at("dit.adaln.w"), rng, 0.5);
  Tape<float> t(false);
  const WeightSource<float> w{&p};
  const auto mods = dit.adaln_single(t, w, dit.timestep_embedding(t, w, 0.6));
  ASSERT_EQ(mods.size(), 4u);
  EXPECT_GT(mods[0].value().cwiseAbs().maxCoeff(), 0.0f);
  for (const auto& m : mods) EXPECT_EQ(m.value(), mods[0].value());
}

class Ffn1d : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(1);
    dit_.init(p_, rng);
    randomize(p_, 2, 0.5);
  }
  Matrix<double> run(const Matrix<double>& x) {
    Tape<double> t(false);
    return dit_.ffn_1d(t, WeightSource<double>{&p_}, "dit.block0.ffn", t.constant(x)).value();
  }
  LinearDit<double> dit_{micro_dit()};
  ParamStore<double> p_;
};

TEST_F(Ffn1d, SingleTokenIsPointwiseMlp) {
  Rng rng(3);
  const Matrix<double> x = rng.normal_matrix<double>(1, 8);
  Matrix<double> h = x * p_.at("dit.block0.ffn.w1").transpose() + p_.at("dit.block0.ffn.b1");
  h = h.cwiseProduct(p_.at("dit.block0.ffn.dw").row(1));
  h = h.unaryExpr([](double a) { return a / (1.0 + std::exp(-a)); });
  const Matrix<double> expect = h * p_.at("dit.block0.ffn.w2").transpose() + p_.at("dit.block0.ffn.b2");
  EXPECT_LT((run(x) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST_F(Ffn1d, ZeroDepthwiseKernelAddsNothing) {
  p_.at("dit.block0.ffn.dw").setZero();
  p_.at("dit.block0.ffn.b2").setZero();
  Rng rng(4);
  EXPECT_EQ(run(rng.normal_matrix<double>(6, 8)).cwiseAbs().maxCoeff(), 0.0);
}

TEST_F(Ffn1d, TranslationEquivariantAwayFromBoundaries) {
  Rng rng(5);
  const Matrix<double> x = rng.normal_matrix<double>(16, 8);
  const Index k = 3;
  Matrix<double> shifted = Matrix<double>::Zero(16, 8);
  shifted.bottomRows(16 - k) = x.topRows(16 - k);
  const Matrix<double> a = run(x), b = run(shifted);
  // rows k+1 .. 14 of b see the same 3-token neighbourhoods as rows 1 .. 14-k of a
  for (Index r = k + 1; r < 15; ++r) EXPECT_LT((b.row(r) - a.row(r - k)).cwiseAbs().maxCoeff(), 1e-12) << r;
}

TEST(Dit, PaddedLyricsDoNotChangePrediction) {
  LinearDit<double> dit(micro_dit());
  ParamStore<double> p;
  Rng rng(1);
  dit.init(p, rng);
  randomize(p, 2);
  ConditionBundle c = make_condition("pop", "ab", 1);
  ConditionBundle padded = c;
  padded.lyrics.ids.insert(padded.lyrics.ids.end(), 4, kTokPad);
  Rng data(3);
  const Matrix<double> x = data.normal_matrix<double>(5, 8);
  Tape<double> t(false);
  const Matrix<double> a = dit.forward(t, WeightSource<double>{&p}, x, 0.5, c).velocity.value();
  const Matrix<double> b = dit.forward(t, WeightSource<double>{&p}, x, 0.5, padded).velocity.value();
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
}

// ---------------------------------------------------------------------------
// LoRA

TEST(Lora, FreshAdapterIsExactNoOp) {
  Denoiser<float> model(micro_dit(), 1);
  randomize(model.params, 2);
  LoraAdapter<float> lora(model.params, LoraConfig{2, 4.0, model.dit().lora_targets()}, 3);
  Rng data(4);
  const Matrix<float> x = data.normal_matrix<float>(6, 8);
  const ConditionBundle c = make_condition("pop", "ab", 0);
  EXPECT_EQ(model.velocity(x, 0.5, c), model.velocity(x, 0.5, c, &lora));
}

TEST(Lora, MergeReproducesAdaptedOutputs) {
  Denoiser<double> model(micro_dit(), 1);
  randomize(model.params, 2);
  LoraAdapter<double> lora(model.params, LoraConfig{2, 4.0, model.dit().lora_targets()}, 3);
  randomize(lora.params, 5, 0.3);
  const ParamStore<double> base = model.params;
  Rng data(4);
  const Matrix<float> x = data.normal_matrix<float>(6, 8);
  const ConditionBundle c = make_condition("pop", "ab", 0);
  const Matrix<float> adapted = model.velocity(x, 0.5, c, &lora);
  EXPECT_TRUE(model.params == base);  // base untouched by adapted forward
  EXPECT_GT((adapted - model.velocity(x, 0.5, c)).cwiseAbs().maxCoeff(), 1e-3f);
  lora.merge_into(model.params);
  EXPECT_LT((model.velocity(x, 0.5, c) - adapted).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Lora, RankMustBeBelowMinDim) {
  Denoiser<float> model(micro_dit(), 1);
  EXPECT_EQ(error_of([&] { LoraAdapter<float>(model.params, LoraConfig{8, 8.0, model.dit().lora_targets()}, 1); }),
            ErrorKind::kInvalidArgument);
  EXPECT_EQ(error_of([&] { LoraAdapter<float>(model.params, LoraConfig{0, 1.0, model.dit().lora_targets()}, 1); }),
            ErrorKind::kInvalidArgument);
}

TEST(Lora, EffectiveWeightIsBasePlusScaledProduct) {
  ParamStore<double> base;
  Rng rng(1);
  init_normal(base.add("w", 4, 3), rng, 1.0);
  LoraAdapter<double> lora(base, LoraConfig{2, 3.0, {"w"}}, 2);
  init_normal(lora.params.at("lora.w.B"), rng, 1.0);
  Tape<double> t(false);
  const Matrix<double> eff = WeightSource<double>{&base, &lora, false}(t, "w").value();
  const Matrix<double> expect = base.at("w") + 1.5 * lora.params.at("lora.w.B") * lora.params.at("lora.w.A");
  EXPECT_LT((eff - expect).cwiseAbs().maxCoeff(), 1e-12);
}

}  // namespace
}  // namespace acestep
