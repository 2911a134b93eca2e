#include "helpers.hpp"

#include "kvprune/checkpoint_io.hpp"
#include "kvprune/errors.hpp"
#include "kvprune/finetune.hpp"

#include <doctest.h>

#include <filesystem>

using namespace kvprune;

TEST_CASE("FNV-1a hash values") {
    CHECK(content_hash("") == "cbf29ce484222325");
    CHECK(content_hash("a") == "af63dc4c8601ec8c");
    CHECK(content_hash("foobar") == "85944171f73967e8");
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    Checkpoint ck = kvtest::tiny_model(1);
    ck.meta.steps = 12;
    ck.meta.final_loss = 0.1 + 0.2;
    ck.meta.note = "unit";
    ck.config.scale_mode = ScaleMode::recomputed;
    const std::string bytes = serialize_checkpoint(ck);
    CHECK(bytes.substr(0, 5) == "KVPR1");
    const auto file = deserialize_checkpoint(bytes);
    CHECK(!file.adapters);
    const Checkpoint & back = file.checkpoint;
    CHECK(serialize_checkpoint(back) == bytes);
    CHECK(back.meta.final_loss == ck.meta.final_loss);
    CHECK(back.config.scale_mode == ScaleMode::recomputed);
    const Weights & cw = ck.weights;
    std::vector<const Matrix *> a = tensor_ptrs(cw), b = tensor_ptrs(back.weights);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(*a[i] == *b[i]);
    }
    CHECK(checkpoint_hash(back) == checkpoint_hash(ck));
}

TEST_CASE("adapter section round-trips") {
    const Checkpoint ck = kvtest::tiny_model(2);
    AttachOptions o;
    o.rank = 3;
    o.alpha = 5.0;
    o.seed = 4;
    AdapterSet set = attach(ck, o);
    set.adapters[1].b(0, 0) = 0.25;
    const auto file = deserialize_checkpoint(serialize_checkpoint(ck, &set));
    REQUIRE(file.adapters);
    CHECK(file.adapters->alpha == 5.0);
    REQUIRE(file.adapters->adapters.size() == set.adapters.size());
    for (size_t i = 0; i < set.adapters.size(); ++i) {
        CHECK(file.adapters->adapters[i].target() == set.adapters[i].target());
        CHECK(file.adapters->adapters[i].a == set.adapters[i].a);
        CHECK(file.adapters->adapters[i].b == set.adapters[i].b);
    }
}

TEST_CASE("corrupt files are schema errors") {
    const std::string bytes = serialize_checkpoint(kvtest::tiny_model(3));
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad), SchemaError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 8)), SchemaError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, 9)), SchemaError);
    CHECK_THROWS_AS(deserialize_checkpoint(""), SchemaError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes + "junk"), SchemaError);
}

TEST_CASE("hashes track content") {
    Checkpoint ck = kvtest::tiny_model(4);
    const std::string h = checkpoint_hash(ck), w = weights_hash(ck);
    CHECK(h.size() == 16);
    CHECK(checkpoint_hash(kvtest::tiny_model(4)) == h);
    ck.meta.note = "changed";
    CHECK(checkpoint_hash(ck) != h);
    CHECK(weights_hash(ck) == w);
    ck.weights.head(0, 0) += 1e-12;
    CHECK(weights_hash(ck) != w);
}

TEST_CASE("file save and load") {
    const auto dir = std::filesystem::temp_directory_path() / "kvprune_ckpt_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "m.kvpr").string();
    const Checkpoint ck = kvtest::tiny_model(5);
    save_checkpoint(path, ck);
    CHECK(checkpoint_hash(load_checkpoint(path)) == checkpoint_hash(ck));
    CHECK_THROWS_AS(load_checkpoint((dir / "missing.kvpr").string()), IoError);
    std::filesystem::remove_all(dir);
}
