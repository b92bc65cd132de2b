#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "birqa/datakit.hpp"
#include "temp_dir.hpp"

using namespace birqa;

namespace {

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

Manifest small_set(const TempDir& dir, int refs = 6, int severities = 2) {
  gen_references(dir / "refs", refs, 16, 16, 7);
  SynthConfig cfg;
  cfg.severities = severities;
  cfg.seed = 3;
  return gen_synthetic(dir / "refs", dir / "set", cfg);
}

NetworkConfig tiny_config(std::uint64_t seed = 1) {
  NetworkConfig cfg;
  cfg.channels = 8;
  cfg.head_width = 8;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(Manifest, ParsesRowsAndRange) {
  std::istringstream in("ref_path,dist_path,mos\na.ppm,b.ppm,3.5\n\"c,1.ppm\",d.ppm,7\n");
  const Manifest m = parse_manifest(in, "/data", false);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m.rows[1].ref_path, "c,1.ppm");
  EXPECT_EQ(m.mos_min, 3.5);
  EXPECT_EQ(m.mos_max, 7.0);
  EXPECT_EQ(m.resolve("x.ppm"), fs::path("/data/x.ppm"));
  EXPECT_EQ(m.resolve("/abs/x.ppm"), fs::path("/abs/x.ppm"));
}

TEST(Manifest, MisspelledHeaderNamesExpected) {
  std::istringstream in("ref_path,dist_path,mso\na,b,1\n");
  const auto msg = error_of([&] { parse_manifest(in, ".", false); });
  EXPECT_NE(msg.find("ref_path,dist_path,mos"), std::string::npos) << msg;
}

TEST(Manifest, CommaDecimalReportsRowNumber) {
  std::istringstream in("ref_path,dist_path,mos\na,b,1\nc,d,\"3,5\"\n");
  const auto msg = error_of([&] { parse_manifest(in, ".", false); });
  EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
  std::istringstream unquoted("ref_path,dist_path,mos\na,b,3,5\n");
  EXPECT_NE(error_of([&] { parse_manifest(unquoted, ".", false); }).find("row 2"), std::string::npos);
}

TEST(Manifest, MissingFileAndDegenerateLabels) {
  TempDir dir("manifest");
  std::istringstream in("ref_path,dist_path,mos\nnope.ppm,b.ppm,1\nx,y,2\n");
  EXPECT_NE(error_of([&] { parse_manifest(in, dir.path(), true); }).find("nope.ppm"), std::string::npos);
  std::istringstream flat("ref_path,dist_path,mos\na,b,1\nc,d,1\n");
  EXPECT_THROW(parse_manifest(flat, ".", false), Error);
  EXPECT_THROW(load_manifest(dir / "absent.csv"), Error);
}

TEST(Manifest, SaveLoadRoundTrip) {
  TempDir dir("manifest_rt");
  const Manifest m = small_set(dir, 3, 1);
  const Manifest back = load_manifest(dir / "set/manifest.csv");
  ASSERT_EQ(back.size(), m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(back.rows[i].dist_path, m.rows[i].dist_path);
    EXPECT_EQ(back.rows[i].mos, m.rows[i].mos);
  }
}

TEST(Manifest, SavedElsewhereStillResolves) {
  TempDir dir("manifest_move");
  small_set(dir, 2, 1);
  const Manifest m = load_manifest(dir / "set/manifest.csv");
  fs::create_directories(dir / "splits/a");
  save_manifest(m, dir / "splits/a/copy.csv");
  const Manifest back = load_manifest(dir / "splits/a/copy.csv");
  ASSERT_EQ(back.size(), m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(fs::canonical(back.resolve(back.rows[i].dist_path)), fs::canonical(m.resolve(m.rows[i].dist_path)));
    EXPECT_EQ(back.rows[i].dist_path.rfind("../../set/", 0), 0u) << back.rows[i].dist_path;
  }
}

TEST(Synthetic, LabelsAndLadder) {
  TempDir dir("synth");
  const Manifest m = small_set(dir, 4, 5);
  ASSERT_EQ(m.size(), 4u * 11);
  for (std::size_t r = 0; r < 4; ++r) {
    const auto* row = &m.rows[r * 11];
    EXPECT_EQ(row[0].mos, 10.0);
    for (int s = 1; s < 5; ++s) EXPECT_LT(row[1 + s].mos, row[s].mos) << "blur ladder " << r;
    for (int s = 0; s < 11; ++s) {
      EXPECT_GE(row[s].mos, 0.0);
      EXPECT_LE(row[s].mos, 10.0);
    }
    // labels are recomputable from the stored pair
    const RgbImage ref = load_image(m.resolve(row[3].ref_path)), d = load_image(m.resolve(row[3].dist_path));
    EXPECT_EQ(pseudo_mos(ref, d), row[3].mos);
  }
}

TEST(Synthetic, SameSeedSameBytes) {
  TempDir a("synth_a"), b("synth_b");
  const Manifest ma = small_set(a, 2, 2), mb = small_set(b, 2, 2);
  ASSERT_EQ(ma.size(), mb.size());
  for (std::size_t i = 0; i < ma.size(); ++i) {
    EXPECT_EQ(read_bytes(ma.resolve(ma.rows[i].dist_path)), read_bytes(mb.resolve(mb.rows[i].dist_path)));
  }
  EXPECT_EQ(read_bytes(a / "set/manifest.csv"), read_bytes(b / "set/manifest.csv"));
}

TEST(Synthetic, EmptyReferenceDirIsAnError) {
  TempDir dir("synth_empty");
  EXPECT_THROW(gen_synthetic(dir.path(), dir / "out"), Error);
}

TEST(Split, DisjointReferencesAndDeterministic) {
  Manifest m;
  for (int r = 0; r < 10; ++r) {
    for (int d = 0; d < 3; ++d) m.rows.push_back({"r" + std::to_string(r), "d" + std::to_string(d), r + 0.1 * d});
  }
  const Split s = split_by_reference(m, 4), t = split_by_reference(m, 4);
  EXPECT_EQ(s.train.size(), 18u);
  EXPECT_EQ(s.val.size(), 6u);
  EXPECT_EQ(s.test.size(), 6u);
  std::set<std::string> tr, rest;
  for (const auto& r : s.train.rows) tr.insert(r.ref_path);
  for (const auto* part : {&s.val, &s.test}) {
    for (const auto& r : part->rows) EXPECT_FALSE(tr.count(r.ref_path));
  }
  for (std::size_t i = 0; i < s.train.size(); ++i) EXPECT_EQ(s.train.rows[i].ref_path, t.train.rows[i].ref_path);
  m.rows.resize(6);
  EXPECT_THROW(split_by_reference(m, 1), Error);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  TempDir dir("ckpt");
  Model model(tiny_config(5));
  ad::AdamState<float> adam;
  adam.step = 3;
  for (auto* p : model.parameters()) {
    adam.m.push_back(std::vector<float>(p->size(), 0.25f));
    adam.v.push_back(std::vector<float>(p->size(), 0.5f));
  }
  save_checkpoint(model, dir / "m.ckpt", &adam, 42);
  const Checkpoint ck = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(ck.step, 42);
  ASSERT_TRUE(ck.adam.has_value());
  EXPECT_EQ(ck.adam->step, 3);
  EXPECT_EQ(ck.adam->m, adam.m);
  const Model back = load_model(dir / "m.ckpt");
  EXPECT_EQ(back.config(), model.config());
  for (int k = 0; k < 5; ++k) {
    const PlanarImage a = to_float(procedural_reference(16, 16, 100 + k));
    const PlanarImage b = to_float(procedural_reference(16, 16, 200 + k));
    const auto pyr = build_pyramid(a, b);
    const float s1 = model.score(pyr), s2 = back.score(pyr);
    EXPECT_EQ(std::memcmp(&s1, &s2, sizeof s1), 0);
  }
  save_checkpoint(back, dir / "m2.ckpt", &adam, 42);
  EXPECT_EQ(read_bytes(dir / "m.ckpt"), read_bytes(dir / "m2.ckpt"));
}

TEST(Checkpoint, CorruptionIsDetected) {
  TempDir dir("ckpt_bad");
  Model model(tiny_config());
  save_checkpoint(model, dir / "m.ckpt");
  const std::string good = read_bytes(dir / "m.ckpt");
  std::string flipped = good;
  flipped[flipped.size() - 7] ^= 0x10;
  write_bytes(dir / "flip.ckpt", flipped);
  EXPECT_NE(error_of([&] { load_model(dir / "flip.ckpt"); }).find("checksum"), std::string::npos);
  write_bytes(dir / "trunc.ckpt", good.substr(0, good.size() - 16));
  EXPECT_THROW(load_model(dir / "trunc.ckpt"), Error);
  write_bytes(dir / "magic.ckpt", "BIRQA2\n" + good.substr(7));
  EXPECT_NE(error_of([&] { load_model(dir / "magic.ckpt"); }).find("magic"), std::string::npos);
  EXPECT_THROW(load_model(dir / "none.ckpt"), IoError);
}

TEST(Checkpoint, AblatedCheckpointRefusesFullModel) {
  TempDir dir("ckpt_ablate");
  NetworkConfig ablated = tiny_config();
  ablated.enable_csram = false;
  save_checkpoint(Model(ablated), dir / "a.ckpt");
  Model full(tiny_config());
  const auto msg = error_of([&] { apply_checkpoint(load_checkpoint(dir / "a.ckpt"), full); });
  EXPECT_NE(msg.find("missing in checkpoint"), std::string::npos) << msg;
  EXPECT_NE(msg.find("csram0.down.w"), std::string::npos) << msg;
}

TEST(Sweep, SubsetsAndNames) {
  const auto subs = all_subsets();
  ASSERT_EQ(subs.size(), 15u);
  std::set<unsigned long> distinct;
  for (auto s : subs) distinct.insert(s.to_ulong());
  EXPECT_EQ(distinct.size(), 15u);
  EXPECT_EQ(subs.front().count(), 1u);
  EXPECT_EQ(subs.back().count(), 4u);
  EXPECT_EQ(subset_name(parse_feature_mask("1001")), "SSIM+LBP");
}

TEST(Sweep, ParetoFront) {
  std::vector<SweepRow> rows(3);
  rows[0].srocc = 0.9, rows[0].pairs_per_sec = 10;
  rows[1].srocc = 0.8, rows[1].pairs_per_sec = 20;
  rows[2].srocc = 0.7, rows[2].pairs_per_sec = 15;
  mark_pareto(rows);
  EXPECT_TRUE(rows[0].pareto);
  EXPECT_TRUE(rows[1].pareto);
  EXPECT_FALSE(rows[2].pareto);
}

TEST(Sweep, FullSubsetMatchesDefaultTrainingAndSingleFeatureIsFaster) {
  TempDir dir("sweep");
  const Manifest m = small_set(dir, 6, 2);
  const Split sp = split_by_reference(m, 1);
  const auto train = load_samples(sp.train), val = load_samples(sp.val);
  TrainOptions opt;
  opt.epochs = 2;
  opt.batch_size = 8;
  opt.lr = 1e-3;
  opt.seed = 2;
  const std::vector<FeatureMask> subs{parse_feature_mask("0010"), kAllFeatures};
  const auto rows = feature_sweep(train, val, subs, tiny_config(), opt);
  ASSERT_EQ(rows.size(), 2u);
  Model ref(tiny_config());
  train_clean(ref, train, opt);
  EXPECT_EQ(rows[1].srocc, srocc(labels(val), predict(ref, val)));
  EXPECT_GT(rows[0].pairs_per_sec, rows[1].pairs_per_sec);
  std::ostringstream csv;
  write_sweep_csv(csv, rows);
  EXPECT_EQ(csv.str().rfind("subset,srocc,plcc,pairs_per_sec,pareto\nCOLORDIFF,", 0), 0u) << csv.str();
}
