#include <gtest/gtest.h>

#include <map>
#include <random>
#include <sstream>

#include "qtrack/data_pipeline.hpp"
#include "qtrack/synthetic.hpp"

namespace qtrack {
namespace {

QueryPair pair_of(const std::string& a, const std::string& b, std::size_t count = 1) {
  return {tokenize(a), tokenize(b), count};
}

TEST(TokenizeTest, Examples) {
  EXPECT_EQ(tokenize("Red  Dress"), (Tokens{"red", "dress"}));
  EXPECT_TRUE(tokenize("!!!").empty());
  EXPECT_EQ(tokenize("nike 黑色"), (Tokens{"nike", "黑色"}));
  EXPECT_EQ(tokenize("t-shirt, cotton!"), (Tokens{"tshirt", "cotton"}));
  EXPECT_EQ(normalize_query("red red dress"), (Tokens{"red", "dress"}));
}

TEST(ReadLogsTest, RejectsMalformedRecords) {
  std::istringstream is(
      "u1\t100\tnike shoes\n"
      "u1\tabc\tnike\n"
      "u2\t-5\tdress\n"
      "just one field\n"
      "u3\t7\t!!!\n"
      "\n"
      "u4\t8\t  Red Dress \r\n");
  auto r = read_logs(is);
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.records[1].query, "Red Dress");
  EXPECT_EQ(r.rejects.size(), 4u);
  for (const auto& rej : r.rejects) EXPECT_EQ(rej.reason, RejectReason::kBadRecord);
}

TEST(MinePairsTest, WindowBoundaries) {
  auto count_pairs = [](std::int64_t dt) {
    return mine_pairs({{"u", 0, "shoes"}, {"u", dt, "nike shoes"}}, 30).size();
  };
  EXPECT_EQ(count_pairs(29 * 60), 1u);
  EXPECT_EQ(count_pairs(30 * 60), 1u);
  EXPECT_EQ(count_pairs(31 * 60), 0u);
}

TEST(MinePairsTest, AggregatesNormalizedPairsAndDropsIdentical) {
  auto pairs = mine_pairs({{"a", 0, "Nike Shoes"},
                           {"a", 10, "adidas shoes"},
                           {"b", 0, "nike  shoes!"},
                           {"b", 10, "Adidas shoes"},
                           {"c", 0, "dress"},
                           {"c", 5, "DRESS"}});
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].count, 2u);
  EXPECT_EQ(pairs[0].first, (Tokens{"nike", "shoes"}));
}

TEST(MinePairsTest, InterleavedUsersMatchBruteForceSplitter) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> user(0, 3), word(0, 5), gap(1, 40 * 60);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<RawLogRecord> logs;
    std::int64_t t = 0;
    for (int i = 0; i < 40; ++i) {
      t += 1 + gap(rng) / 4;
      logs.push_back({"u" + std::to_string(user(rng)), t, "w" + std::to_string(word(rng)) + " x"});
    }
    // Oracle: per-user chronological lists, adjacent elements paired.
    std::map<std::pair<Tokens, Tokens>, std::size_t> expected;
    std::map<std::string, std::vector<const RawLogRecord*>> by_user;
    for (const auto& r : logs) by_user[r.user_id].push_back(&r);
    for (const auto& [u, recs] : by_user) {
      for (std::size_t i = 1; i < recs.size(); ++i) {
        if (recs[i]->timestamp - recs[i - 1]->timestamp > 30 * 60) continue;
        auto a = tokenize(recs[i - 1]->query), b = tokenize(recs[i]->query);
        if (a != b) ++expected[{a, b}];
      }
    }
    std::shuffle(logs.begin(), logs.end(), rng);
    std::map<std::pair<Tokens, Tokens>, std::size_t> got;
    for (const auto& p : mine_pairs(logs)) got[{p.first, p.second}] += p.count;
    EXPECT_EQ(got, expected);
  }
}

TEST(FilterFrequencyTest, Boundary) {
  const std::vector<QueryPair> pairs{pair_of("a", "b", 5), pair_of("a", "c", 4), pair_of("a", "d", 9)};
  const auto kept = filter_frequency(pairs, 5);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].count, 5u);
  EXPECT_EQ(kept[1].count, 9u);
  EXPECT_TRUE(filter_frequency({}, 5).empty());
}

TEST(BuildTripletTest, Examples) {
  auto t = std::get<TrackingTriplet>(build_triplet(pair_of("Adidas shoes", "Nike shoes")));
  EXPECT_EQ(t.q2, (Tokens{"nike"}));
  EXPECT_EQ(t.labels, (std::vector<int>{0, 1}));

  t = std::get<TrackingTriplet>(build_triplet(pair_of("dress", "red dress")));
  EXPECT_EQ(t.q2, (Tokens{"red"}));
  EXPECT_EQ(t.labels, (std::vector<int>{1}));

  auto r = std::get<Reject>(build_triplet(pair_of("red dress", "red")));
  EXPECT_EQ(r.reason, RejectReason::kEmptyQ2);
  r = std::get<Reject>(build_triplet(pair_of("red dress", "the red dress")));
  EXPECT_EQ(r.reason, RejectReason::kMeaninglessQ2);
  r = std::get<Reject>(build_triplet(QueryPair{{"dress"}, {"dress", "-"}, 1}));
  EXPECT_EQ(r.reason, RejectReason::kMeaninglessQ2);
}

TEST(BuildTripletTest, DuplicatesCollapseAndCountCarries) {
  auto t = std::get<TrackingTriplet>(build_triplet(QueryPair{{"red", "dress", "red"}, {"blue", "dress", "blue"}, 3}));
  EXPECT_EQ(t.q1, (Tokens{"red", "dress"}));
  EXPECT_EQ(t.q3, (Tokens{"blue", "dress"}));
  EXPECT_EQ(t.q2, (Tokens{"blue"}));
  EXPECT_EQ(t.labels, (std::vector<int>{0, 1}));
  EXPECT_EQ(t.count, 3u);
}

TEST(BuildTripletTest, InvariantsHoldOnRandomPairs) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> len(1, 6), word(0, 9);
  for (int i = 0; i < 500; ++i) {
    QueryPair p;
    for (int k = len(rng); k > 0; --k) p.first.push_back("w" + std::to_string(word(rng)));
    for (int k = len(rng); k > 0; --k) p.second.push_back("w" + std::to_string(word(rng)));
    auto r = build_triplet(p);
    if (auto* t = std::get_if<TrackingTriplet>(&r)) {
      EXPECT_NO_THROW(validate_triplet(*t));
    }
  }
}

std::vector<TrackingTriplet> numbered_triplets(std::size_t n, std::size_t distinct_keys) {
  std::vector<TrackingTriplet> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string k = "k" + std::to_string(i % distinct_keys);
    out.push_back({{k, "x"}, {"y"}, {k, "x", "y"}, {1, 1}, 1});
  }
  return out;
}

TEST(SplitTest, RatiosDeterminismAndNoLeakage) {
  const auto data = numbered_triplets(2000, 1500);
  auto a = split(data, {0.899, 0.05, 0.051}, 7);
  auto b = split(data, {0.899, 0.05, 0.051}, 7);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_EQ(a.train.size() + a.val.size() + a.test.size(), 2000u);
  EXPECT_NEAR(a.train.size() / 2000.0, 0.899, 0.01);
  EXPECT_NEAR(a.val.size() / 2000.0, 0.05, 0.01);
  std::map<Tokens, int> where;
  int s = 0;
  for (const auto* part : {&a.train, &a.val, &a.test}) {
    for (const auto& t : *part) {
      auto [it, inserted] = where.emplace(t.q1, s);
      EXPECT_EQ(it->second, s) << "key in two splits";
    }
    ++s;
  }
  auto all = split(data, {1, 0, 0}, 1);
  EXPECT_EQ(all.train.size(), 2000u);
  EXPECT_TRUE(all.val.empty() && all.test.empty());
}

TEST(SplitTest, Errors) {
  EXPECT_THROW(split(numbered_triplets(10, 10), {0.5, 0.2, 0.2}, 1), Error);
  EXPECT_THROW(split({}, {0.8, 0.1, 0.1}, 1), Error);
}

TEST(JsonlTest, RoundTripAndValidation) {
  const auto data = numbered_triplets(5, 3);
  std::stringstream ss;
  write_triplets(ss, data);
  EXPECT_EQ(read_triplets(ss), data);
  std::istringstream bad(R"({"q1":["a"],"q2":["b"],"q3":["b"],"labels":[1]})");
  EXPECT_THROW(read_triplets(bad), Error);
  std::istringstream junk("{not json");
  EXPECT_THROW(read_triplets(junk), Error);
}

TEST(SyntheticTest, SchemaValidation) {
  auto schema = default_schema(1);
  EXPECT_NO_THROW(schema.validate());
  schema.slots[2].values.clear();
  EXPECT_THROW(gen_synthetic(schema, 3), Error);
  auto empty = gen_synthetic(default_schema(1), 0);
  EXPECT_TRUE(empty.logs.empty());
  EXPECT_TRUE(empty.gold.empty());
}

TEST(SyntheticTest, VocabularyIsAboutTwoThousandDisjointWords) {
  const auto schema = default_schema(1);
  std::map<std::string, std::string> owner;
  for (const auto& slot : schema.slots) {
    for (const auto& v : slot.values) {
      for (const auto& tok : tokenize(v)) {
        auto [it, inserted] = owner.emplace(tok, slot.name);
        EXPECT_TRUE(inserted) << tok << " in " << it->second << " and " << slot.name;
      }
    }
  }
  EXPECT_GT(owner.size(), 1800u);
  EXPECT_LT(owner.size(), 2200u);
}

TEST(SyntheticTest, SlotSemanticsOfGoldLabels) {
  const auto schema = default_schema(3);
  std::map<std::string, std::string> slot_of;
  for (const auto& slot : schema.slots)
    for (const auto& v : slot.values)
      for (const auto& tok : tokenize(v)) slot_of[tok] = slot.name;
  const auto corpus = gen_synthetic(schema, 3000);
  std::size_t replaced = 0, coexisted = 0;
  for (const auto& t : corpus.gold) {
    EXPECT_LE(t.q1.size(), 8u);
    EXPECT_LE(t.q3.size(), 8u);
    std::set<std::string> new_slots;
    for (const auto& w : t.q2) new_slots.insert(slot_of.at(w));
    for (std::size_t i = 0; i < t.q1.size(); ++i) {
      const std::string& slot = slot_of.at(t.q1[i]);
      if (!new_slots.count(slot)) {
        EXPECT_EQ(t.labels[i], 1) << "untouched slot value dropped";
      } else if (slot == "style") {
        EXPECT_EQ(t.labels[i], 1);
        ++coexisted;
      } else {
        EXPECT_EQ(t.labels[i], 0);
        ++replaced;
      }
    }
  }
  EXPECT_GT(replaced, 500u);
  EXPECT_GT(coexisted, 100u);
}

TEST(SyntheticTest, DeterministicForSeed) {
  const auto a = gen_synthetic(default_schema(5), 200);
  const auto b = gen_synthetic(default_schema(5), 200);
  EXPECT_EQ(a.gold, b.gold);
  ASSERT_EQ(a.logs.size(), b.logs.size());
  for (std::size_t i = 0; i < a.logs.size(); ++i) EXPECT_EQ(a.logs[i].query, b.logs[i].query);
}

TEST(SyntheticTest, PipelineRoundTripReproducesGold) {
  const auto corpus = gen_synthetic(default_schema(2), 2000);
  std::stringstream log;
  for (const auto& r : corpus.logs) write_log(log, r);
  const auto parsed = read_logs(log);
  EXPECT_TRUE(parsed.rejects.empty());
  const auto built = build_triplets(filter_frequency(mine_pairs(parsed.records), 1));
  EXPECT_TRUE(built.rejects.empty());
  std::map<std::tuple<Tokens, Tokens, Tokens, std::vector<int>>, std::size_t> gold, mined;
  for (const auto& t : corpus.gold) ++gold[{t.q1, t.q2, t.q3, t.labels}];
  for (const auto& t : built.triplets) mined[{t.q1, t.q2, t.q3, t.labels}] += t.count;
  EXPECT_EQ(mined, gold);
}

TEST(SyntheticTest, SplitsHaveRequestedSizes) {
  const auto s = synthetic_splits(default_schema(4), 1000, 100, 120, 9);
  EXPECT_EQ(s.train.size(), 1000u);
  EXPECT_EQ(s.val.size(), 100u);
  EXPECT_EQ(s.test.size(), 120u);
}

}  // namespace
}  // namespace qtrack
