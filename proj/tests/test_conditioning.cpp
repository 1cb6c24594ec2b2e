#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "elab/conditioning.hpp"

using namespace elab;

TEST_CASE("encode_prompt is an identity lookup in token order") {
    auto t = make_vocab<double>({"<digit-3>"}, 8, 1);
    auto c = t.encode_prompt({"a", "photo", "of", "<digit-3>"});
    CHECK(c.dim(0) == 4);
    CHECK(c.dim(1) == 8);
    for (int j = 0; j < 8; ++j) CHECK(c.at2(3, j) == t.row("<digit-3>").v[static_cast<std::size_t>(j)]);

    auto n = t.encode_prompt({kNullToken});
    CHECK(n.dim(0) == 1);
    for (int j = 0; j < 8; ++j) CHECK(n.v[static_cast<std::size_t>(j)] == t.row(kNullToken).v[static_cast<std::size_t>(j)]);

    CHECK_THROWS(t.encode_prompt({"nope"}));
    CHECK_THROWS(t.encode_prompt({}));
}

TEST_CASE("row overwrite is visible to encode_prompt") {
    auto t = make_vocab<double>({"<digit-3>"}, 4, 1);
    Tensor<double> v({4});
    v.v = {1, 2, 3, 4};
    t.row("<digit-3>") = v;
    auto c = t.encode_prompt({"<digit-3>"});
    for (int j = 0; j < 4; ++j) CHECK(c.v[static_cast<std::size_t>(j)] == v.v[static_cast<std::size_t>(j)]);
}

TEST_CASE("placeholders") {
    auto t = make_vocab<double>({"<digit-3>"}, 16, 2);

    SUBCASE("duplicate name is rejected") {
        t.add_placeholder("<ci:x>", TokenTableT<double>::PlaceholderInit::Random, 5);
        CHECK_THROWS(t.add_placeholder("<ci:x>", TokenTableT<double>::PlaceholderInit::Random, 6));
    }
    SUBCASE("copy_of duplicates the source row exactly") {
        t.add_placeholder("<ci:c>", TokenTableT<double>::PlaceholderInit::CopyOf, 0, "<digit-3>");
        CHECK(bit_equal(t.row("<ci:c>"), t.row("<digit-3>")));
        CHECK_THROWS(t.add_placeholder("<ci:d>", TokenTableT<double>::PlaceholderInit::CopyOf, 0, "<gone>"));
    }
    SUBCASE("random init is seed-deterministic with variance 0.01") {
        t.add_placeholder("<ci:a>", TokenTableT<double>::PlaceholderInit::Random, 9);
        auto t2 = make_vocab<double>({"<digit-3>"}, 16, 2);
        t2.add_placeholder("<ci:a>", TokenTableT<double>::PlaceholderInit::Random, 9);
        CHECK(bit_equal(t.row("<ci:a>"), t2.row("<ci:a>")));
        // loose sanity on the scale: each coordinate within 6 sigma of 0
        for (double x : t.row("<ci:a>").v) CHECK(std::abs(x) < 0.6);
    }
    SUBCASE("placeholder names are namespaced away from base vocabulary") {
        CHECK_THROWS(t.add_placeholder("plain", TokenTableT<double>::PlaceholderInit::Random, 3));
        Tensor<double> r({16});
        CHECK_THROWS(t.add_token("<ci:sneaky>", r));
    }
}

TEST_CASE("freezing bookkeeping") {
    auto t = make_vocab<double>({"<digit-0>", "<digit-1>"}, 8, 3);
    t.add_placeholder("<ci:v>", TokenTableT<double>::PlaceholderInit::Random, 4);
    t.freeze_all_except({"<ci:v>"});
    CHECK(t.is_frozen("<digit-0>"));
    CHECK(t.is_frozen(kNullToken));
    CHECK_FALSE(t.is_frozen("<ci:v>"));
    // non-placeholder hash ignores the placeholder row
    const auto h = t.non_placeholder_hash();
    t.row("<ci:v>").v[0] += 1.0;
    CHECK(t.non_placeholder_hash() == h);
    t.row("<digit-0>").v[0] += 1.0;
    CHECK(t.non_placeholder_hash() != h);
}
