#include "support.hpp"

#include <gtest/gtest.h>

using namespace cachesteer;
using testing_support::kFixtures;
using testing_support::kGpt2Dir;

namespace {

const Vocab& toy_vocab() {
  static const Vocab v = Vocab::load(kFixtures / "vocab.json", kFixtures / "merges.txt");
  return v;
}

std::optional<Vocab> gpt2_vocab() {
  if (!std::filesystem::exists(kGpt2Dir / "encoder.json")) return std::nullopt;
  return Vocab::load(kGpt2Dir / "encoder.json", kGpt2Dir / "vocab.bpe");
}

std::string random_bytes(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> byte(0, 255);
  std::string s(n, '\0');
  for (auto& c : s) c = static_cast<char>(byte(rng));
  return s;
}

std::vector<std::string> pieces(const Vocab& v, std::string_view text) {
  std::vector<std::string> out;
  for (auto id : v.encode(text).ids) out.push_back(v.token_bytes(id));
  return out;
}

}  // namespace

TEST(Tokenizer, EmptyInputEncodesToNothing) {
  EXPECT_TRUE(toy_vocab().encode("").empty());
  EXPECT_EQ(toy_vocab().decode(std::vector<TokenId>{}), "");
}

TEST(Tokenizer, ToyVocabShape) {
  const auto& v = toy_vocab();
  EXPECT_EQ(v.size(), 321u);
  EXPECT_EQ(v.token_bytes(v.eot_id()), std::string(kEndOfText));
  for (int b = 0; b < 256; ++b) EXPECT_TRUE(v.find(std::string(1, static_cast<char>(b))).has_value()) << b;
}

TEST(Tokenizer, ToyMergesProduceWholeWords) {
  const auto& v = toy_vocab();
  EXPECT_EQ(pieces(v, "Image of a cat"), (std::vector<std::string>{"Image", " of", " a", " cat"}));
  EXPECT_EQ(pieces(v, "Image of a zebra"), (std::vector<std::string>{"Image", " of", " a", " zeb", "ra"}));
}

TEST(Tokenizer, RandomByteStringsRoundTrip) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 1000; ++i) {
    const auto s = random_bytes(rng, 64);
    ASSERT_EQ(toy_vocab().decode(toy_vocab().encode(s)), s) << "string " << i;
  }
}

TEST(Tokenizer, HelloWorldRoundTrips) {
  const auto& v = toy_vocab();
  EXPECT_EQ(v.decode(v.encode("hello world")), "hello world");
}

TEST(Tokenizer, OffsetsStrictlyIncreasingAndPointAtTokenBytes) {
  const auto& v = toy_vocab();
  std::mt19937_64 rng(11);
  for (int i = 0; i < 200; ++i) {
    const auto s = random_bytes(rng, 40) + " Image of a zebra";
    const auto seq = v.encode(s);
    ASSERT_EQ(seq.ids.size(), seq.text_offsets.size());
    for (std::size_t k = 0; k < seq.size(); ++k) {
      if (k) {
        ASSERT_GT(seq.text_offsets[k], seq.text_offsets[k - 1]);
      }
      const auto& tok = v.token_bytes(seq.ids[k]);
      ASSERT_EQ(s.substr(seq.text_offsets[k], tok.size()), tok);
      ASSERT_LT(static_cast<std::size_t>(seq.ids[k]), v.size());
    }
  }
}

TEST(Tokenizer, EncodingIsDeterministic) {
  const auto& v = toy_vocab();
  const auto a = v.encode("Image of a dog and a cat on the man");
  const auto b = v.encode("Image of a dog and a cat on the man");
  EXPECT_EQ(a.ids, b.ids);
  EXPECT_EQ(a.text_offsets, b.text_offsets);
}

TEST(Tokenizer, NonEotTokensDecodeNonEmpty) {
  const auto& v = toy_vocab();
  for (TokenId id = 0; id < static_cast<TokenId>(v.size()); ++id) EXPECT_FALSE(v.token_bytes(id).empty());
}

TEST(Tokenizer, UnknownIdIsAnError) {
  const auto& v = toy_vocab();
  EXPECT_THROW(v.decode(std::vector<TokenId>{static_cast<TokenId>(v.size())}), InputError);
  EXPECT_THROW(v.decode(std::vector<TokenId>{-1}), InputError);
}

TEST(Tokenizer, CapitalizationExamples) {
  const auto& v = toy_vocab();
  EXPECT_TRUE(v.starts_capitalized(*v.find("Image")));
  EXPECT_FALSE(v.starts_capitalized(*v.find(" of")));
  EXPECT_TRUE(v.starts_capitalized(*v.find("T")));
  EXPECT_FALSE(v.starts_capitalized(*v.find("t")));
}

TEST(Tokenizer, CapitalizationMatchesCharacterOracle) {
  const auto& v = toy_vocab();
  for (TokenId id = 0; id < static_cast<TokenId>(v.size()); ++id) {
    const std::string& t = v.token_bytes(id);
    bool expect = false;
    const std::size_t from = !t.empty() && t[0] == ' ' ? 1 : 0;
    for (std::size_t i = from; i < t.size(); ++i) {
      if (std::isalpha(static_cast<unsigned char>(t[i])) && static_cast<unsigned char>(t[i]) < 0x80) {
        expect = std::isupper(static_cast<unsigned char>(t[i])) != 0;
        break;
      }
    }
    EXPECT_EQ(v.starts_capitalized(id), expect) << "token " << id << " [" << t << "]";
  }
}

TEST(Tokenizer, SaveLoadRoundTrip) {
  const auto dir = testing_support::temp_dir("vocab");
  toy_vocab().save(dir / "v.json", dir / "m.txt");
  const auto again = Vocab::load(dir / "v.json", dir / "m.txt");
  EXPECT_EQ(again.size(), toy_vocab().size());
  EXPECT_EQ(again.merges(), toy_vocab().merges());
  EXPECT_EQ(again.encode("Image of a zebra").ids, toy_vocab().encode("Image of a zebra").ids);
  std::filesystem::remove_all(dir);
}

TEST(Tokenizer, MalformedVocabFilesAreInputErrors) {
  const auto dir = testing_support::temp_dir("badvocab");
  EXPECT_THROW(Vocab::load(dir / "missing.json", dir / "missing.txt"), InputError);
  std::ofstream(dir / "v.json") << "{\"a\": 0";
  std::ofstream(dir / "m.txt") << "";
  EXPECT_THROW(Vocab::load(dir / "v.json", dir / "m.txt"), InputError);
  std::ofstream(dir / "v2.json") << "{\"a\": 0, \"<|endoftext|>\": 1}";
  EXPECT_THROW(Vocab::load(dir / "v2.json", dir / "m.txt"), InputError);  // missing base bytes
  std::filesystem::remove_all(dir);
}

// Reference ids produced by the published GPT-2 tokenizer (Hugging Face implementation).
TEST(Tokenizer, Gpt2ReferenceIds) {
  auto v = gpt2_vocab();
  if (!v) GTEST_SKIP() << "GPT-2 vocabulary not present; run tools/fetch_gpt2_vocab.sh";
  EXPECT_EQ(v->size(), 50257u);
  EXPECT_EQ(v->eot_id(), 50256);
  EXPECT_EQ(v->encode("Image of a cat").ids, (std::vector<TokenId>{5159, 286, 257, 3797}));
  EXPECT_EQ(v->encode("Hello world").ids, (std::vector<TokenId>{15496, 995}));
  EXPECT_EQ(v->encode("don't stop").ids, (std::vector<TokenId>{9099, 470, 2245}));
  EXPECT_EQ(v->encode("zebra").ids, (std::vector<TokenId>{89, 37052}));
  EXPECT_EQ(v->encode(" zebra").ids, (std::vector<TokenId>{1976, 37052}));
  EXPECT_EQ(v->encode("123  x").ids, (std::vector<TokenId>{10163, 220, 2124}));
  EXPECT_TRUE(v->starts_capitalized(383));   // " The"
  EXPECT_FALSE(v->starts_capitalized(262));  // " the"
}

TEST(Tokenizer, Gpt2RandomBytesRoundTrip) {
  auto v = gpt2_vocab();
  if (!v) GTEST_SKIP() << "GPT-2 vocabulary not present";
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const auto s = random_bytes(rng, 64);
    ASSERT_EQ(v->decode(v->encode(s)), s);
  }
}
