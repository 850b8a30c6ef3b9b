#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "mtlse/errors.hpp"
#include "mtlse/textdata.hpp"

using namespace mtlse::textdata;
namespace fs = std::filesystem;

namespace {

fs::path write_tmp(const std::string& name, const std::string& content) {
    fs::path p = fs::temp_directory_path() / ("mtlse_test_" + name);
    std::ofstream out(p);
    out << content;
    return p;
}

}  // namespace

TEST_CASE("build_vocab applies the frequency filter") {
    std::vector<std::vector<std::string>> corpus{{"a", "b"}, {"a"}};
    Vocabulary v2 = build_vocab(corpus, 2);
    CHECK(v2.size() == 3);  // pad, unk, "a"
    CHECK(v2.index("a") == 2);
    CHECK(v2.index("b") == Vocabulary::kUnk);

    Vocabulary v1 = build_vocab(corpus, 1);
    CHECK(v1.size() == 4);
    CHECK(v1.index("a") == 2);
    CHECK(v1.index("b") == 3);
}

TEST_CASE("build_vocab is deterministic and rejects empty corpora") {
    std::vector<std::vector<std::string>> corpus{{"x", "y", "z"}, {"y", "w"}};
    Vocabulary a = build_vocab(corpus, 1);
    Vocabulary b = build_vocab(corpus, 1);
    for (const auto& tok : {"x", "y", "z", "w"}) CHECK(a.index(tok) == b.index(tok));
    CHECK_THROWS_AS(build_vocab({}, 1), mtlse::data_error);
}

TEST_CASE("tokenize lowercases and splits on whitespace") {
    auto toks = tokenize("A Man\truns  FAST ");
    CHECK(toks == std::vector<std::string>{"a", "man", "runs", "fast"});
    CHECK(tokenize("   ").empty());
}

TEST_CASE("load_embeddings parses the text convention") {
    std::vector<std::vector<std::string>> corpus{{"cat", "dog"}};
    Vocabulary v = build_vocab(corpus, 1);
    auto p = write_tmp("emb.txt", "cat 0.1 0.2\nhorse 0.5 0.5\n");

    EmbeddingTable t = load_embeddings(p.string(), v);
    CHECK(t.dim() == 2);
    CHECK(t.frozen);
    CHECK(t.row(v.index("cat"))[0] == doctest::Approx(0.1));
    CHECK(t.row(v.index("cat"))[1] == doctest::Approx(0.2));
    // absent token with zeros policy -> zero row
    CHECK(t.row(v.index("dog"))[0] == 0.0);
    CHECK(t.row(v.index("dog"))[1] == 0.0);
    // padding row is zero
    CHECK(t.row(Vocabulary::kPad)[0] == 0.0);
}

TEST_CASE("load_embeddings seeded uniform policy is reproducible") {
    std::vector<std::vector<std::string>> corpus{{"cat", "dog"}};
    Vocabulary v = build_vocab(corpus, 1);
    auto p = write_tmp("emb2.txt", "cat 0.1 0.2\n");
    EmbeddingTable a = load_embeddings(p.string(), v, OovPolicy::SeededUniform, 7);
    EmbeddingTable b = load_embeddings(p.string(), v, OovPolicy::SeededUniform, 7);
    CHECK(a.weights.data == b.weights.data);
    CHECK(a.row(v.index("dog"))[0] != 0.0);
    CHECK(a.row(Vocabulary::kPad)[0] == 0.0);
}

TEST_CASE("load_embeddings format errors") {
    Vocabulary v;
    auto bad_dim = write_tmp("emb3.txt", "cat 0.1 0.2\ndog 0.3\n");
    CHECK_THROWS_AS(load_embeddings(bad_dim.string(), v), mtlse::data_error);
    auto bad_float = write_tmp("emb4.txt", "cat 0.1 zap\n");
    CHECK_THROWS_AS(load_embeddings(bad_float.string(), v), mtlse::data_error);
}

TEST_CASE("load_pair_dataset parses, validates, and round-trips") {
    TaskSpec task;
    task.name = "nli";
    task.labels = {"neutral", "entail"};

    std::vector<std::vector<std::string>> corpus{{"a", "man", "runs", "person", "moves"}};
    Vocabulary v = build_vocab(corpus, 1);

    auto p = write_tmp("pairs.tsv", "1\tA man runs\tA person moves\nentail\tman moves\ta man\n");
    Dataset d = load_pair_dataset(p.string(), task, v);
    REQUIRE(d.size() == 2);
    CHECK(d.examples[0].label == 1);
    CHECK(d.examples[0].tokens1.size() == 3);
    CHECK(d.examples[0].tokens2.size() == 3);
    CHECK(d.examples[1].label == 1);  // named label resolves to its index

    SUBCASE("empty sentence field is rejected") {
        auto bad = write_tmp("pairs_bad.tsv", "1\t\tA person moves\n");
        CHECK_THROWS_AS(load_pair_dataset(bad.string(), task, v), mtlse::data_error);
    }
    SUBCASE("wrong field count names the line") {
        auto bad = write_tmp("pairs_bad2.tsv", "1\tonly one sentence\n");
        CHECK_THROWS_WITH_AS(load_pair_dataset(bad.string(), task, v),
                             doctest::Contains("line 1"), mtlse::data_error);
    }
    SUBCASE("unknown label name is rejected") {
        auto bad = write_tmp("pairs_bad3.tsv", "maybe\ta man\ta man\n");
        CHECK_THROWS_AS(load_pair_dataset(bad.string(), task, v), mtlse::data_error);
    }
    SUBCASE("write/read preserves all examples") {
        RawDataset raw{{1, {"a", "man", "runs"}, {"a", "person", "moves"}},
                       {0, {"man", "moves"}, {"a", "man"}}};
        auto rt = write_tmp("pairs_rt.tsv", "");
        save_pair_dataset(rt.string(), raw);
        Dataset d2 = load_pair_dataset(rt.string(), task, v);
        REQUIRE(d2.size() == raw.size());
        for (std::size_t i = 0; i < raw.size(); ++i) {
            CHECK(d2.examples[i].label == raw[i].label);
            CHECK(d2.examples[i].tokens1.size() == raw[i].s1.size());
            for (std::size_t j = 0; j < raw[i].s1.size(); ++j)
                CHECK(d2.examples[i].tokens1[j] == v.index(raw[i].s1[j]));
        }
    }
}

TEST_CASE("shared overlap labeling is definitional") {
    std::unordered_set<std::string> content{"x7", "x9"};
    CHECK(shared_overlap_label({"a", "x7"}, {"x7", "b"}, content) == 1);
    CHECK(shared_overlap_label({"a", "x7"}, {"x9", "b"}, content) == 0);
    CHECK(shared_overlap_label({"a", "b"}, {"c", "d"}, content) == 0);
}

TEST_CASE("marker parity labeling is definitional") {
    CHECK(marker_parity_label({"a", "b", "c", "mk0"}, "mk0") == 1);  // position 3 -> odd
    CHECK(marker_parity_label({"mk0", "b"}, "mk0") == 0);
    CHECK_THROWS_AS(marker_parity_label({"a", "b"}, "mk0"), std::invalid_argument);
}

TEST_CASE("synth_generate: determinism, balance, label agreement") {
    for (SynthKind kind : {SynthKind::SharedOverlap, SynthKind::PrivateMarker}) {
        SynthSpec spec;
        spec.kind = kind;
        spec.seed = 42;
        spec.size = 500;
        RawDataset a = synth_generate(spec);
        RawDataset b = synth_generate(spec);
        REQUIRE(a.size() == 500);
        std::size_t ones = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].label == b[i].label);
            CHECK(a[i].s1 == b[i].s1);
            CHECK(a[i].s2 == b[i].s2);
            ones += static_cast<std::size_t>(a[i].label);
            if (kind == SynthKind::SharedOverlap)
                CHECK(a[i].label ==
                      shared_overlap_label(a[i].s1, a[i].s2, synth_content_set(spec)));
            else
                CHECK(a[i].label == marker_parity_label(a[i].s1, spec.marker));
        }
        // balanced within +-2%
        CHECK(std::abs(static_cast<double>(ones) / 500.0 - 0.5) <= 0.02);
    }
    SynthSpec other;
    other.seed = 43;
    CHECK(synth_generate(other)[0].s1 != synth_generate(SynthSpec{})[0].s1);
}

TEST_CASE("markers appear only in marker-task sentences") {
    SynthSpec overlap;
    overlap.kind = SynthKind::SharedOverlap;
    overlap.size = 200;
    overlap.seed = 3;
    for (const RawExample& e : synth_generate(overlap)) {
        for (const auto& t : e.s1) CHECK(t != overlap.marker);
        for (const auto& t : e.s2) CHECK(t != overlap.marker);
    }
    SynthSpec marker;
    marker.kind = SynthKind::PrivateMarker;
    marker.size = 200;
    marker.seed = 3;
    for (const RawExample& e : synth_generate(marker)) {
        CHECK(std::count(e.s1.begin(), e.s1.end(), marker.marker) == 1);
        CHECK(std::count(e.s2.begin(), e.s2.end(), marker.marker) >= 1);
    }
}

TEST_CASE("task manifest parsing") {
    auto p = write_tmp("task.manifest",
                       "name = overlap\n"
                       "type = synthetic\n"
                       "kind = SHARED-OVERLAP\n"
                       "train_size = 100\n"
                       "dev_size = 20\n");
    TaskSpec spec = load_task_manifest(p.string());
    CHECK(spec.name == "overlap");
    REQUIRE(spec.synthetic.has_value());
    CHECK(spec.synthetic->kind == SynthKind::SharedOverlap);
    CHECK(spec.train_size == 100);
    CHECK(spec.class_count() == 2);

    auto bad_key = write_tmp("task_bad.manifest",
                             "name = t\ntype = synthetic\nkind = SHARED-OVERLAP\nzap = 1\n");
    CHECK_THROWS_WITH_AS(load_task_manifest(bad_key.string()), doctest::Contains("unknown key"),
                         mtlse::config_error);
    auto bad_kind = write_tmp("task_bad2.manifest", "name = t\ntype = synthetic\nkind = NOPE\n");
    CHECK_THROWS_AS(load_task_manifest(bad_kind.string()), mtlse::config_error);
}

TEST_CASE("batch_iter partitions the dataset") {
    Dataset d;
    d.task = "t";
    d.num_classes = 2;
    for (int i = 0; i < 10; ++i) {
        Example e;
        e.task = "t";
        e.label = i % 2;
        e.tokens1 = {2, 3};
        e.tokens1.resize(2 + static_cast<std::size_t>(i) % 3, 2);
        e.tokens2 = {3};
        d.examples.push_back(e);
    }

    auto batches = batch_iter(d, 4, 99);
    REQUIRE(batches.size() == 3);
    CHECK(batches[0].size() == 4);
    CHECK(batches[1].size() == 4);
    CHECK(batches[2].size() == 2);

    // same seed, same order
    auto again = batch_iter(d, 4, 99);
    for (std::size_t i = 0; i < batches.size(); ++i) CHECK(batches[i].ids == again[i].ids);

    // union of emitted ids equals dataset ids
    std::set<std::size_t> seen;
    for (const auto& b : batches) {
        for (std::size_t id : b.ids) seen.insert(id);
        // rows padded to batch max with the padding index, true lengths kept
        for (std::size_t r = 0; r < b.size(); ++r) {
            CHECK(b.s1[r].size() >= b.len1[r]);
            for (std::size_t j = b.len1[r]; j < b.s1[r].size(); ++j)
                CHECK(b.s1[r][j] == Vocabulary::kPad);
        }
    }
    CHECK(seen.size() == 10);
    CHECK_THROWS_AS(batch_iter(d, 0), std::invalid_argument);
}
