#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "dpe/checkpoint.hpp"
#include "dpe/error.hpp"
#include "dpe/io.hpp"
#include "oracles.hpp"

using namespace dpe;

namespace {

Checkpoint trained_checkpoint() {
  const Architecture arch =
      parse_architecture("conv:3:3:1:1,bn,relu,conv:2:2x3:2:0:nobias,dense:5,relu,dense:3,softmax",
                         {1, 6, 5});
  EnsembleModel model = init_ensemble(arch, 3, 0.125, 77);
  Samples s{oracle::random_tensor({12, 1, 6, 5}, 3), oracle::random_labels(12, 3, 4)};
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.lr = 0.01;
  cfg.track_accuracy = false;
  train(model, s, cfg);
  Standardizer st{{0.5, -1.25}, {2.0, 1e-3}};
  return {model, st};
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact") {
  const Checkpoint ckpt = trained_checkpoint();
  const std::string bytes = serialize_checkpoint(ckpt);
  CHECK(bytes.substr(0, 8) == std::string("DPECKPT\0", 8));
  const Checkpoint back = deserialize_checkpoint(bytes);

  CHECK(back.model.beta == ckpt.model.beta);
  CHECK(back.model.seed == ckpt.model.seed);
  REQUIRE(back.model.size() == ckpt.model.size());
  CHECK(format_architecture(back.model.architecture()) ==
        format_architecture(ckpt.model.architecture()));
  for (std::size_t m = 0; m < ckpt.model.size(); ++m) {
    const Network& a = ckpt.model.members[m];
    const Network& b = back.model.members[m];
    for (std::size_t i = 0; i < a.params().size(); ++i) {
      CHECK(a.params()[i].name == b.params()[i].name);
      CHECK(std::memcmp(a.params()[i].value.data().data(), b.params()[i].value.data().data(),
                        8 * a.params()[i].value.size()) == 0);
      CHECK(a.params()[i].prior.sigma2_p == b.params()[i].prior.sigma2_p);
    }
    for (std::size_t i = 0; i < a.state().size(); ++i)
      CHECK(a.state()[i].value == b.state()[i].value);
  }
  REQUIRE(back.standardizer);
  CHECK(back.standardizer->mean == ckpt.standardizer->mean);
  CHECK(back.standardizer->scale == ckpt.standardizer->scale);
  CHECK(serialize_checkpoint(back) == bytes);

  const Tensor x = oracle::random_tensor({5, 1, 6, 5}, 9);
  CHECK(predict_mean(back.model, x) == predict_mean(ckpt.model, x));
}

TEST_CASE("checkpoint without standardizer and special values") {
  Checkpoint ckpt = trained_checkpoint();
  ckpt.standardizer.reset();
  ckpt.model.members[0].mutable_params()[0].value[0] = -0.0;
  ckpt.model.members[0].mutable_params()[0].value[1] = 5e-324;
  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(ckpt));
  CHECK_FALSE(back.standardizer);
  CHECK(std::signbit(back.model.members[0].params()[0].value[0]));
  CHECK(back.model.members[0].params()[0].value[1] == 5e-324);
}

TEST_CASE("checkpoint errors") {
  const std::string bytes = serialize_checkpoint(trained_checkpoint());

  std::string future = bytes;
  future[8] = 7;  // little-endian u32 version
  CHECK_THROWS_WITH_AS(deserialize_checkpoint(future),
                       doctest::Contains("version 7 is not supported (this build reads version 1)"),
                       ParseError);

  std::string magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(magic), ParseError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 8)), ParseError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, 10)), ParseError);
  CHECK_THROWS_AS(deserialize_checkpoint(""), ParseError);

  std::string manifest = bytes;
  manifest[24] = '#';
  CHECK_THROWS_AS(deserialize_checkpoint(manifest), ParseError);
}

TEST_CASE("save and load through a file") {
  const auto dir = std::filesystem::path(DPE_TEST_DATA_DIR) / "ckpt" / "nested";
  std::filesystem::remove_all(dir.parent_path());
  const Checkpoint ckpt = trained_checkpoint();
  save_checkpoint(ckpt, dir / "m.dpe");
  CHECK(std::filesystem::exists(dir / "m.dpe"));
  CHECK_FALSE(std::filesystem::exists(dir / "m.dpe.tmp"));
  CHECK(serialize_checkpoint(load_checkpoint(dir / "m.dpe")) == serialize_checkpoint(ckpt));
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.dpe"), ParseError);
}
