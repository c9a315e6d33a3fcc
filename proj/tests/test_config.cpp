#include <fstream>
#include <sstream>

#include "doctest.h"
#include "memcomputer/checkpoint.hpp"
#include "memcomputer/config.hpp"
#include "test_util.hpp"

using namespace memcomputer;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

ModelConfig tiny(const std::string& arch) {
  ModelConfig c;
  c.input_size = c.output_size = 5;
  c.controller.layers = {4, 3};
  c.backward_controller.layers = {2};
  c.memory.locations = 3;
  c.memory.width = 2;
  c.memory.read_heads = 2;
  return apply_preset(c, arch);
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("configurations round-trip through JSON") {
  for (const std::string arch : {"dnc", "rsdnc", "bdnc", "brsdnc"}) {
    ModelConfig c = tiny(arch);
    c.embedding_vocab = 9;
    c.output_bias = false;
    c.controller.per_gate_norm = true;
    CHECK(to_json(model_config_from_json(to_json(c))) == to_json(c));
  }
  TrainConfig t;
  t.early_stop_wer = 0.01;
  t.padding = Padding::front;
  t.keep_checkpoints = 3;
  CHECK(to_json(train_config_from_json(to_json(t))) == to_json(t));
  CHECK_FALSE(train_config_from_json(to_json(TrainConfig{})).early_stop_wer.has_value());

  GeneratorConfig g;
  g.task = TaskKind::induction;
  g.induction.mode = InductionMode::augmented;
  g.copy.symbols = 4;
  CHECK(to_json(generator_config_from_json(to_json(g))) == to_json(g));

  RunConfig r;
  r.model = tiny("brsdnc");
  r.paths.train = "a.jsonl";
  const Json j = to_json(r);
  CHECK(j.at("schema_version") == kConfigSchemaVersion);
  CHECK(to_json(run_config_from_json(j)) == j);
}

TEST_CASE("partial documents overlay defaults and presets") {
  const ModelConfig m = model_config_from_json(Json::parse(R"({"arch": "dnc", "keep_prob": 1.0})"));
  CHECK(m.memory.variant == MemoryVariant::dnc);
  CHECK_FALSE(m.memory.layer_norm);
  CHECK(m.controller.layers == std::vector<std::size_t>{256});

  const ModelConfig b = model_config_from_json(Json::parse(R"({"arch": "brsdnc", "memory": {"locations": 7}})"),
                                               tiny("dnc"));
  CHECK(b.bidirectional());
  CHECK(b.memory.locations == 7);
  CHECK(b.memory.width == 2);
  CHECK(b.memory.variant == MemoryVariant::cbmu);

  const TrainConfig t = train_config_from_json(Json::parse(R"({"learning_rate": 0.001})"));
  CHECK(t.learning_rate == 0.001);
  CHECK(t.batch_size == 32);
  CHECK(t.momentum == 0.9);

  CHECK(parse_architecture("bi") == Architecture::bidirectional);
  CHECK(parse_task_kind("induction16") == TaskKind::induction);
  CHECK(parse_padding(to_string(Padding::front)) == Padding::front);
}

TEST_CASE("invalid documents are rejected") {
  CHECK_THROWS_AS(model_config_from_json(Json::parse(R"({"units": 3})")), ConfigError);
  CHECK_THROWS_AS(mu_config_from_json(Json::parse(R"({"locatoins": 3})")), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(Json::parse(R"({"learning_rate": "fast"})")), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(Json::parse(R"({"arch": "lstm"})")), std::invalid_argument);
  CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"schema_version": 99})")), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(Json::parse(R"({"schema_version": 1, "extra": {}})")), ConfigError);
  CHECK_THROWS_AS(parse_padding("middle"), ConfigError);

  const auto dir = testutil::scratch_dir("config-files");
  spit(dir / "bad.json", "{ not json");
  CHECK_THROWS_AS(load_run_config((dir / "bad.json").string()), ConfigError);
  CHECK_THROWS(load_run_config((dir / "missing.json").string()));
}

TEST_CASE("checkpoints round-trip exactly") {
  const auto dir = testutil::scratch_dir("ckpt");
  for (const std::string arch : {"dnc", "brsdnc"}) {
    Rng rng(1);
    Checkpoint ck;
    ck.model = init_model(tiny(arch), rng);
    for (auto& p : ck.model.parameters())
      for (double& v : p.tensor.mutable_data()) v = rng.uniform(-1, 1) * 1e-3 + v;
    Vocabulary v;
    v.add("a");
    v.add("b");
    ck.vocabulary = v;
    ck.optimizer = init_optimizer(ck.model.parameters());
    for (Tensor& a : ck.optimizer->acc)
      for (double& x : a.mutable_data()) x = rng.uniform();
    ck.optimizer->step = 17;
    ck.progress = {17, 2, 3, 0xdeadbeefcafef00dULL};
    ck.train_config = to_json(TrainConfig{});

    const fs::path p = dir / (arch + ".bin");
    save_checkpoint(p, ck);
    const Checkpoint back = load_checkpoint(p);
    CHECK(to_json(back.model.config) == to_json(ck.model.config));
    CHECK(back.vocabulary == ck.vocabulary);
    CHECK(back.progress.step == 17);
    CHECK(back.progress.epoch == 2);
    CHECK(back.progress.cursor == 3);
    CHECK(back.progress.dropout_rng == 0xdeadbeefcafef00dULL);
    REQUIRE(back.optimizer.has_value());
    CHECK(back.optimizer->step == 17);
    const auto a = ck.model.parameters(), b = back.model.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].name == b[i].name);
      CHECK(a[i].tensor.shape() == b[i].tensor.shape());
      CHECK(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin()));
      CHECK(std::equal(ck.optimizer->acc[i].data().begin(), ck.optimizer->acc[i].data().end(),
                       back.optimizer->acc[i].data().begin()));
    }
    // Saving the loaded checkpoint reproduces the file byte for byte.
    save_checkpoint(dir / "again.bin", back);
    CHECK(slurp(p) == slurp(dir / "again.bin"));
  }
}

TEST_CASE("damaged checkpoints are rejected") {
  const auto dir = testutil::scratch_dir("ckpt-bad");
  Rng rng(2);
  Checkpoint ck;
  ck.model = init_model(tiny("rsdnc"), rng);
  ck.vocabulary = Vocabulary{};
  const fs::path p = dir / "good.bin";
  save_checkpoint(p, ck);
  CHECK_FALSE(load_checkpoint(p).optimizer.has_value());
  const std::string bytes = slurp(p);

  std::string magic = bytes;
  magic[0] = 'X';
  spit(dir / "magic.bin", magic);
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.bin"), CheckpointError);

  std::string version = bytes;
  version[8] = 9;
  spit(dir / "version.bin", version);
  CHECK_THROWS_AS(load_checkpoint(dir / "version.bin"), CheckpointError);

  for (std::size_t cut : {std::size_t{4}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    spit(dir / "cut.bin", bytes.substr(0, cut));
    CAPTURE(cut);
    CHECK_THROWS_AS(load_checkpoint(dir / "cut.bin"), CheckpointError);
  }
  spit(dir / "long.bin", bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(dir / "long.bin"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.bin"), CheckpointError);
}

}  // TEST_SUITE
