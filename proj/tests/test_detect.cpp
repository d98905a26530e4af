#include <gtest/gtest.h>

#include <chrono>

#include "au/detect.hpp"
#include "oracle.hpp"

using namespace au;
using namespace au::detect;
using au::corpus::Marker;
using au::testing::brute_force_mask;
using au::testing::fuzz_sequence;

namespace {

struct Fixture {
  corpus::World w = corpus::build_world(7);
  const corpus::Vocabulary& v = w.vocab;
  TokenId m(Marker x) const { return v.marker(x); }
  TokenId tok(const std::string& s) const { return v.id(s); }
};

}  // namespace

TEST(Extract, ImportSpan) {
  Fixture f;
  const TokenSeq seq = {f.m(Marker::Task), f.tok("xformers"), f.m(Marker::Code), f.m(Marker::Import),
                        f.tok("fast"), f.tok("json"), f.m(Marker::End)};
  const auto spans = extract_package_spans(seq, f.v);
  ASSERT_EQ(spans.size(), 1u);
  EXPECT_EQ(spans[0].start, 4);
  EXPECT_EQ(spans[0].end, 6);
  EXPECT_EQ(spans[0].name, "fastjson");
}

TEST(Extract, ListSpans) {
  Fixture f;
  const TokenSeq seq = {f.m(Marker::Task), f.tok("xformers"), f.m(Marker::Req), f.tok("fast"), f.tok("json"),
                        f.m(Marker::Sep), f.tok("quick"), f.tok("plot"), f.m(Marker::End)};
  const auto spans = extract_package_spans(seq, f.v);
  ASSERT_EQ(spans.size(), 2u);
  EXPECT_EQ(spans[1].name, "quickplot");
}

TEST(Extract, MalformedTailsAreSkipped) {
  Fixture f;
  const TokenSeq dangling = {f.m(Marker::Task), f.tok("xformers"), f.m(Marker::Code), f.m(Marker::Import), f.tok("fast"),
                             f.m(Marker::End)};
  EXPECT_TRUE(extract_package_spans(dangling, f.v).empty());
  const TokenSeq triple = {f.m(Marker::Import), f.tok("fast"), f.tok("json"), f.tok("plot"), f.m(Marker::End)};
  EXPECT_TRUE(extract_package_spans(triple, f.v).empty());
  const TokenSeq reversed = {f.m(Marker::Import), f.tok("json"), f.tok("fast"), f.m(Marker::End)};
  EXPECT_TRUE(extract_package_spans(reversed, f.v).empty());
  const TokenSeq unterminated = {f.m(Marker::Req), f.tok("fast"), f.tok("json")};
  EXPECT_TRUE(extract_package_spans(unterminated, f.v).empty());
}

TEST(Resolve, VerdictsFollowTheRegistry) {
  Fixture f;
  const auto valid = f.w.registry.sorted_names().front();
  const auto fake = f.w.fake_names().front();
  const auto [a, b] = f.w.name_tokens(valid);
  const auto [c, d] = f.w.name_tokens(fake);
  const TokenSeq seq = {f.m(Marker::Req), a, b, f.m(Marker::Sep), c, d, f.m(Marker::End)};
  const auto r = resolve_spans(extract_package_spans(seq, f.v), f.w.registry);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].verdict, Verdict::Valid);
  EXPECT_EQ(r[1].verdict, Verdict::Hallucinated);
  EXPECT_TRUE(resolve_spans({}, f.w.registry).empty());
  // One valid and one hallucinated name give a 1-run and a 2-run of length two.
  const auto mask = build_trimask(1, static_cast<int>(seq.size()), r);
  EXPECT_EQ(mask.values, (std::vector<std::uint8_t>{0, 1, 1, 0, 2, 2, 0}));
}

TEST(TriMask, ErrorsOnBadSpans) {
  EXPECT_EQ(build_trimask(2, 5, {}).values, std::vector<std::uint8_t>(5, 0));
  const PackageSpan in_prompt{1, 3, "x", Verdict::Valid};
  EXPECT_THROW(build_trimask(2, 6, {in_prompt}), BoundsError);
  const PackageSpan past_end{4, 7, "x", Verdict::Valid};
  EXPECT_THROW(build_trimask(2, 6, {past_end}), BoundsError);
  const PackageSpan a{2, 4, "a", Verdict::Valid}, b{3, 5, "b", Verdict::Hallucinated};
  EXPECT_THROW(build_trimask(2, 6, {a, b}), BoundsError);
  const PackageSpan unresolved{2, 4, "a", std::nullopt};
  EXPECT_THROW(build_trimask(2, 6, {unresolved}), ArgumentError);
}

TEST(TriMask, FuzzedOverlapsAreRejected) {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const int T = 6 + static_cast<int>(rng.below(20));
    const int s1 = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(T - 3)));
    const int s2 = s1 + static_cast<int>(rng.below(2));  // overlaps s1's [s1, s1+2)
    if (s2 + 2 > T) continue;
    const PackageSpan a{s1, s1 + 2, "a", Verdict::Valid}, b{s2, s2 + 2, "b", Verdict::Hallucinated};
    EXPECT_THROW(build_trimask(0, T, {a, b}), BoundsError);
  }
}

TEST(TriMask, FuzzMatchesBruteForceAndPartitions) {
  Fixture f;
  Rng rng(2024);
  const auto t0 = std::chrono::steady_clock::now();
  int with_spans = 0;
  for (int i = 0; i < 1000; ++i) {
    const TokenSeq seq = fuzz_sequence(rng, f.w);
    const int prompt_len = static_cast<int>(rng.below(std::min<std::size_t>(seq.size(), 4)));
    const TokenSeq prompt(seq.begin(), seq.begin() + prompt_len);
    const TokenSeq completion(seq.begin() + prompt_len, seq.end());
    // Spans that straddle or sit in the prompt are discarded before masking.
    auto spans = resolve_spans(extract_package_spans(seq, f.v), f.w.registry);
    std::erase_if(spans, [&](const PackageSpan& s) { return s.start < prompt_len; });
    const auto mask = build_trimask(prompt_len, static_cast<int>(seq.size()), spans);
    ASSERT_EQ(mask.values, brute_force_mask(seq, prompt_len, f.w)) << f.v.render(seq);
    with_spans += spans.empty() ? 0 : 1;
    const auto r = mask.reg(), k = mask.retain(), g = mask.forget();
    std::vector<int> all;
    all.insert(all.end(), r.begin(), r.end());
    all.insert(all.end(), k.begin(), k.end());
    all.insert(all.end(), g.begin(), g.end());
    std::sort(all.begin(), all.end());
    std::vector<int> expect(seq.size() - 1);
    std::iota(expect.begin(), expect.end(), 1);
    EXPECT_EQ(all, expect);
  }
  EXPECT_GT(with_spans, 200);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 10.0);
}

TEST(Elicit, ProducesThreeModesPerGeneration) {
  Fixture f;
  model::ModelConfig c;
  const auto p = model::init_model<double>(c, 1);
  const auto prompt = corpus::initial_prompts(f.w)[0];
  ElicitSettings s;
  s.master_seed = 3;
  s.generation.max_new_tokens = 16;
  std::vector<ResponseCount> counts;
  const auto samples = elicit_and_label(p, prompt, s, f.w.registry, f.v, &counts);
  ASSERT_EQ(samples.size(), 15u);
  EXPECT_EQ(counts.size(), 15u);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(samples[i].mode, corpus::kAllModes[i % 3]);
    EXPECT_EQ(samples[i].sample_index, static_cast<int>(i / 3));
    EXPECT_EQ(static_cast<int>(samples[i].mask.size()), samples[i].length());
  }
  EXPECT_EQ(to_jsonl(samples), to_jsonl(elicit_and_label(p, prompt, s, f.w.registry, f.v)));
  const auto line = to_json(samples[4]).dump();
  EXPECT_EQ(sample_from_json(json::parse(line)), samples[4]);
}

TEST(Label, OnlyValidOrOnlyFakeCompletions) {
  Fixture f;
  const auto prompt = corpus::initial_prompts(f.w)[0];
  for (const bool valid : {true, false}) {
    const auto name = valid ? f.w.registry.sorted_names()[0] : f.w.fake_names()[0];
    const auto [a, b] = f.w.name_tokens(name);
    for (const auto mode : corpus::kAllModes) {
      const auto ctx = corpus::render_prompt(prompt, mode, f.v);
      TokenSeq completion;
      if (mode == corpus::Mode::Code)
        completion = {f.m(Marker::Import), a, b, f.m(Marker::End)};
      else
        completion = {a, b, f.m(Marker::Sep), a, b, f.m(Marker::End)};
      const auto sample = label_sample(ctx, completion, mode, f.v, f.w.registry);
      for (auto x : sample.mask.values) EXPECT_TRUE(x == 0 || x == (valid ? 1 : 2));
      EXPECT_FALSE(sample.mask.positions(valid ? 1 : 2).empty());
    }
  }
}

TEST(Counting, DuplicatesCollapsePerResponse) {
  std::vector<PackageSpan> spans = {{0, 2, "a", Verdict::Valid},
                                    {2, 4, "b", Verdict::Hallucinated},
                                    {4, 6, "b", Verdict::Hallucinated}};
  const auto c = count_unique_names(spans);
  EXPECT_EQ(c.n_total, 2);
  EXPECT_EQ(c.n_halluc, 1);
  EXPECT_EQ(sample_seed(1, 2, 3, 4, corpus::Mode::Code), sample_seed(1, 2, 3, 4, corpus::Mode::Code));
  EXPECT_NE(sample_seed(1, 2, 3, 4, corpus::Mode::Code), sample_seed(1, 2, 3, 5, corpus::Mode::Code));
}
