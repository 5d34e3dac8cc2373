#pragma once
// Feature records for the three entity kinds, the anchor-group structure,
// and feature hashing into bounded vocabularies.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "onepiece/rng.hpp"

namespace onepiece {

struct ItemFeatures {
    int item_id = 0;
    int category_id = 0;
    int shop_id = 0;
    int price_bucket = 0;
    int pop_bucket = 0;
};

struct UserFeatures {
    int user_id = 0;
    int age_bucket = 0;
    int location_id = 0;
};

struct QueryFeatures {
    int query_id = 0;
    std::vector<double> text;  // fixed-dimension dense vector
    int pop_bucket = 0;
};

enum class AnchorKind : int { top_exposed = 0, top_clicked = 1, top_purchased = 2 };

struct AnchorGroup {
    AnchorKind kind = AnchorKind::top_exposed;
    std::vector<ItemFeatures> items;
};

struct VocabSpec {
    int items = 4096;
    int categories = 64;
    int shops = 128;
    int price = 16;
    int pop = 16;
    int users = 1024;
    int age = 16;
    int locations = 32;
    int queries = 512;
};

// Raw world ids are hashed into the model's bounded vocabularies; the per-
// field salt keeps collisions independent across fields.
inline ItemFeatures hash_item(std::uint64_t item, std::uint64_t category, std::uint64_t shop,
                              int price_bucket, int pop_bucket, const VocabSpec& v) {
    ItemFeatures f;
    f.item_id = hash_bucket(item, v.items, 0x11);
    f.category_id = hash_bucket(category, v.categories, 0x22);
    f.shop_id = hash_bucket(shop, v.shops, 0x33);
    f.price_bucket = price_bucket % v.price;
    f.pop_bucket = pop_bucket % v.pop;
    return f;
}

inline UserFeatures hash_user(std::uint64_t user, int age_bucket, std::uint64_t location,
                              const VocabSpec& v) {
    UserFeatures f;
    f.user_id = hash_bucket(user, v.users, 0x44);
    f.age_bucket = age_bucket % v.age;
    f.location_id = hash_bucket(location, v.locations, 0x55);
    return f;
}

inline QueryFeatures hash_query(std::uint64_t query, std::vector<double> text, int pop_bucket,
                                const VocabSpec& v) {
    QueryFeatures f;
    f.query_id = hash_bucket(query, v.queries, 0x66);
    f.text = std::move(text);
    f.pop_bucket = pop_bucket % v.pop;
    return f;
}

}  // namespace onepiece
