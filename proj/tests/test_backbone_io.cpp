#include "desae/backbone_io.hpp"

#include "synthetic.hpp"
#include "temp_dir.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

using namespace desae;
using desae::testing::TempDir;

namespace {

// Hand-laid ATOM record following the wwPDB column table.
std::string atom_line(int serial, const char* name, const char* res, char chain, int seq, double x, double y,
                      double z, double b = 0.0, char alt = ' ') {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "ATOM  %5d %-4s%c%3s %c%4d    %8.3f%8.3f%8.3f%6.2f%6.2f          %2s",
                serial, name, alt, res, chain, seq, x, y, z, 1.0, b, " C");
  return buf;
}

std::string residue_block(int& serial, const char* res, char chain, int seq, double shift, double b = 0.0,
                          bool with_o = true, bool with_ca = true) {
  std::string out;
  out += atom_line(serial++, " N", res, chain, seq, shift, 0.0, 0.0, b) + "\n";
  if (with_ca) out += atom_line(serial++, " CA", res, chain, seq, shift + 1.0, 0.5, 0.0, b) + "\n";
  out += atom_line(serial++, " C", res, chain, seq, shift + 2.0, 0.0, 0.0, b) + "\n";
  if (with_o) out += atom_line(serial++, " O", res, chain, seq, shift + 2.0, -1.2, 0.0, b) + "\n";
  return out;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

}  // namespace

TEST(ParseStructure, MinimalTwoResidueFile) {
  int serial = 1;
  const std::string text = residue_block(serial, "GLY", 'A', 1, 0.0) + residue_block(serial, "ALA", 'A', 2, 3.8);
  const BackboneStructure s = io::parse_structure_text(text, "mini");
  ASSERT_EQ(s.length(), 2);
  EXPECT_EQ(s.sequence, "GA");
  for (int i = 0; i < 2; ++i)
    for (int a = 0; a < 4; ++a) EXPECT_TRUE(s.atom_mask[i][a]);
  EXPECT_DOUBLE_EQ(s.atom(1, Atom::CA)(0), 4.8);
  EXPECT_DOUBLE_EQ(s.atom(1, Atom::O)(1), -1.2);
  EXPECT_FALSE(s.plddt.has_value());
}

TEST(ParseStructure, MissingOxygenIsMasked) {
  int serial = 1;
  std::string text;
  for (int i = 0; i < 6; ++i) text += residue_block(serial, "LEU", 'A', i + 1, 3.8 * i, 0.0, i != 5);
  const BackboneStructure s = io::parse_structure_text(text, "noO");
  ASSERT_EQ(s.length(), 6);
  EXPECT_FALSE(s.atom_mask[5][3]);
  EXPECT_TRUE(s.atom_mask[5][0] && s.atom_mask[5][1] && s.atom_mask[5][2]);
  EXPECT_DOUBLE_EQ(s.atom(5, Atom::C)(0), 3.8 * 5 + 2.0);
  EXPECT_TRUE(s.atom_mask[4][3]);
}

TEST(ParseStructure, NonNumericCoordinateNamesLine) {
  int serial = 1;
  std::string text = residue_block(serial, "GLY", 'A', 1, 0.0);
  std::string bad = atom_line(serial++, " N", "ALA", 'A', 2, 3.8, 0.0, 0.0);
  bad.replace(38, 8, "  abc.de");  // y field, columns 39-46
  text += bad + "\n";
  try {
    io::parse_structure_text(text, "bad");
    FAIL() << "expected MalformedRecord";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MalformedRecord);
    EXPECT_NE(std::string(e.what()).find("bad:5:"), std::string::npos) << e.what();
  }
}

TEST(ParseStructure, ResiduesWithoutCaAreDropped) {
  int serial = 1;
  const std::string text = residue_block(serial, "GLY", 'A', 1, 0.0) +
                           residue_block(serial, "SER", 'A', 2, 3.8, 0.0, true, false) +
                           residue_block(serial, "ALA", 'A', 3, 7.6);
  const BackboneStructure s = io::parse_structure_text(text, "noCA");
  ASSERT_EQ(s.length(), 2);
  EXPECT_EQ(s.sequence, "GA");
  for (const auto& m : s.atom_mask) EXPECT_TRUE(m[1]);
}

TEST(ParseStructure, FirstModelFirstAltLocSelectedChain) {
  int serial = 1;
  std::string text = "MODEL        1\n";
  text += atom_line(serial++, " N", "GLY", 'A', 1, 0, 0, 0, 0, 'A') + "\n";
  text += atom_line(serial++, " N", "GLY", 'A', 1, 9, 9, 9, 0, 'B') + "\n";
  text += atom_line(serial++, " CA", "GLY", 'A', 1, 1, 0, 0) + "\n";
  text += residue_block(serial, "TRP", 'B', 1, 50.0);
  text += "ENDMDL\nMODEL        2\n";
  text += residue_block(serial, "GLY", 'A', 2, 100.0);
  text += "ENDMDL\n";

  const BackboneStructure a = io::parse_structure_text(text, "multi");
  ASSERT_EQ(a.length(), 1);
  EXPECT_DOUBLE_EQ(a.atom(0, Atom::N)(0), 0.0);
  EXPECT_FALSE(a.atom_mask[0][2]);
  EXPECT_EQ(a.chain_id, 'A');

  const BackboneStructure b = io::parse_structure_text(text, "multi", {.chain = 'B', .predicted = false});
  ASSERT_EQ(b.length(), 1);
  EXPECT_EQ(b.sequence, "W");
}

TEST(ParseStructure, EmptyChainAndMissingFile) {
  EXPECT_THROW(
      {
        try {
          io::parse_structure_text("HEADER    nothing here\nEND\n", "empty");
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), ErrorCode::EmptyChain);
          throw;
        }
      },
      Error);
  try {
    io::parse_structure("/nonexistent/dir/x.pdb");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IoFailure);
  }
}

TEST(ParseStructure, PredictedReadsPlddtFromCaBfactor) {
  int serial = 1;
  const std::string text =
      residue_block(serial, "GLY", 'A', 1, 0.0, 91.25) + residue_block(serial, "ALA", 'A', 2, 3.8, 64.5);
  const BackboneStructure s = io::parse_structure_text(text, "af", {.chain = std::nullopt, .predicted = true});
  ASSERT_TRUE(s.plddt.has_value());
  EXPECT_DOUBLE_EQ((*s.plddt)[0], 91.25);
  EXPECT_DOUBLE_EQ((*s.plddt)[1], 64.5);
}

TEST(WriteStructure, RoundTripWithinFormatPrecision) {
  TempDir dir;
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    BackboneStructure s = desae::testing::make_backbone(5 + trial * 3, 900 + trial);
    s.coords.rowwise() += desae::testing::random_translation(rng, 30.0).transpose();
    if (trial % 3 == 0) s.atom_mask[trial % s.length()][3] = false;
    const auto path = dir / ("s" + std::to_string(trial) + ".pdb");
    io::write_structure(s, path);
    const BackboneStructure back = io::parse_structure(path);
    ASSERT_EQ(back.length(), s.length());
    EXPECT_EQ(back.sequence, s.sequence);
    EXPECT_EQ(back.atom_mask, s.atom_mask);
    double worst = 0.0;
    for (int i = 0; i < s.length(); ++i)
      for (int a = 0; a < 4; ++a)
        if (s.atom_mask[i][a]) worst = std::max(worst, (back.coords.row(4 * i + a) - s.coords.row(4 * i + a)).cwiseAbs().maxCoeff());
    EXPECT_LE(worst, 5e-4);
  }
}

TEST(WriteStructure, BfactorCarriesPlddtAndMaskedAtomsAreAbsent) {
  BackboneStructure s = desae::testing::make_backbone(3, 4);
  s.plddt = std::vector<double>{12.34, 88.0, 70.0};
  s.atom_mask[1][3] = false;
  const std::string text = io::format_structure(s);
  std::istringstream in(text);
  std::string line;
  int atoms = 0;
  while (std::getline(in, line)) {
    if (line.rfind("ATOM", 0) != 0) continue;
    ++atoms;
    EXPECT_EQ(line.substr(54, 6), "  1.00");
    const int residue = std::stoi(line.substr(22, 4)) - 1;
    char expect[8];
    std::snprintf(expect, sizeof(expect), "%6.2f", (*s.plddt)[residue]);
    EXPECT_EQ(line.substr(60, 6), expect);
  }
  EXPECT_EQ(atoms, 11);
  const BackboneStructure back = io::parse_structure_text(text, "b", {.chain = std::nullopt, .predicted = true});
  EXPECT_NEAR((*back.plddt)[0], 12.34, 1e-9);
  EXPECT_FALSE(back.atom_mask[1][3]);
}

TEST(PairManifest, ThreeSplitsNormalizedAndResolved) {
  TempDir dir;
  write_file(dir / "pairs.csv",
             "pair_id,predicted_path,experimental_path,split\n"
             "p1,pred/p1.pdb,exp/p1.pdb,Train\n"
             "p2,pred/p2.pdb,/abs/p2.pdb,val\n"
             "p3,pred/p3.pdb,exp/p3.pdb,TEST\n");
  const io::PairManifest m = io::load_pair_manifest(dir / "pairs.csv");
  ASSERT_EQ(m.rows.size(), 3u);
  EXPECT_EQ(m.rows[0].split, io::Split::Train);
  EXPECT_EQ(m.rows[1].split, io::Split::Val);
  EXPECT_EQ(m.rows[2].split, io::Split::Test);
  EXPECT_EQ(m.rows[0].predicted_path, dir.path() / "pred/p1.pdb");
  EXPECT_EQ(m.rows[1].experimental_path, std::filesystem::path("/abs/p2.pdb"));
  EXPECT_EQ(m.rows_in(io::Split::Train).size(), 1u);
  EXPECT_EQ(io::split_name(m.rows[0].split), "train");
}

TEST(PairManifest, DuplicateIdAndUnknownSplit) {
  TempDir dir;
  write_file(dir / "dup.csv", "pair_id,predicted_path,experimental_path,split\na,x,y,train\na,x,y,val\n");
  write_file(dir / "split.csv", "pair_id,predicted_path,experimental_path,split\na,x,y,holdout\n");
  try {
    io::load_pair_manifest(dir / "dup.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicatePairId);
  }
  try {
    io::load_pair_manifest(dir / "split.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownSplit);
  }
}

TEST(PairManifest, LoadPairChecksLengths) {
  TempDir dir;
  io::write_structure(desae::testing::make_backbone(10, 1), dir / "a.pdb");
  io::write_structure(desae::testing::make_backbone(9, 2), dir / "b.pdb");
  write_file(dir / "m.csv", "pair_id,predicted_path,experimental_path,split\nx,a.pdb,b.pdb,train\ny,a.pdb,a.pdb,train\n");
  const auto m = io::load_pair_manifest(dir / "m.csv");
  try {
    io::load_pair(m.rows[0]);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthMismatch);
  }
  const auto pair = io::load_pair(m.rows[1]);
  EXPECT_EQ(pair.predicted.id, "y");
  EXPECT_EQ(pair.experimental.length(), 10);
}

TEST(FilterPair, StrictPlddtThresholdAndLength) {
  BackboneStructure pred = desae::testing::make_backbone(4, 1);
  BackboneStructure exp = desae::testing::make_backbone(4, 2);
  pred.plddt = std::vector<double>{80.0, 90.0, 85.0, 85.0};
  EXPECT_TRUE(io::filter_pair(pred, exp).accepted);

  pred.plddt = std::vector<double>{70.0, 70.0, 70.0, 70.0};
  const auto at = io::filter_pair(pred, exp);
  EXPECT_FALSE(at.accepted);
  EXPECT_EQ(at.reason, "LowPlddt");

  BackboneStructure long_pred = desae::testing::make_backbone(120, 3);
  long_pred.plddt = std::vector<double>(120, 95.0);
  const auto len = io::filter_pair(long_pred, desae::testing::make_backbone(119, 4));
  EXPECT_FALSE(len.accepted);
  EXPECT_EQ(len.reason, "LengthMismatch");

  pred.plddt.reset();
  try {
    io::filter_pair(pred, exp);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingPlddt);
  }
}

TEST(ListStructureFiles, SortedPdbAndEntOnly) {
  TempDir dir;
  for (const char* name : {"b.pdb", "a.ent", "c.txt", "a.pdb"}) write_file(dir / name, "");
  const auto files = io::list_structure_files(dir.path());
  ASSERT_EQ(files.size(), 3u);
  EXPECT_EQ(files[0].filename(), "a.ent");
  EXPECT_EQ(files[1].filename(), "a.pdb");
  EXPECT_EQ(files[2].filename(), "b.pdb");
}
