#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rediff/rng.hpp"

#include <json.hpp>

namespace rediff {

// Closed attribute space for the symbolic scenes. Surface forms live in the
// grammar file; the grammar loader checks it covers every value here.

enum class Category { Bus, Man, Dog, Tree, Ball, Car, Sign, House };
enum class Color { Red, Blue, Green, Yellow, Black, White };
enum class Size { Small, Large };
enum class Position { Left, Right, Center, Background };

inline constexpr int kNumCategories = 8;
inline constexpr int kNumColors = 6;
inline constexpr int kNumSizes = 2;
inline constexpr int kNumPositions = 4;
inline constexpr int kMinCount = 1;
inline constexpr int kMaxCount = 4;
inline constexpr int kMaxObjects = 5;

inline const char* to_string(Category c) {
    static constexpr std::array<const char*, 8> names = {
        "bus", "man", "dog", "tree", "ball", "car", "sign", "house"};
    return names[static_cast<int>(c)];
}
inline const char* to_string(Color c) {
    static constexpr std::array<const char*, 6> names = {
        "red", "blue", "green", "yellow", "black", "white"};
    return names[static_cast<int>(c)];
}
inline const char* to_string(Size s) { return s == Size::Small ? "small" : "large"; }
inline const char* to_string(Position p) {
    static constexpr std::array<const char*, 4> names = {"left", "right", "center", "background"};
    return names[static_cast<int>(p)];
}

template <typename Enum>
Enum enum_from_string(const std::string& s, int n, const char* what) {
    for (int i = 0; i < n; ++i) {
        if (s == to_string(static_cast<Enum>(i))) return static_cast<Enum>(i);
    }
    throw std::invalid_argument(std::string("unknown ") + what + ": " + s);
}

struct SceneObject {
    Category category{};
    Color color{};
    Size size{};
    int count = 1;  // 1..4
    Position position{};

    bool operator==(const SceneObject&) const = default;
};

// A symbolic "image": 1..5 objects with categorical attributes. Categories
// are unique within a scene, which is what lets the oracle attribute every
// caption mention to exactly one object.
struct Scene {
    std::vector<SceneObject> objects;
    uint64_t seed = 0;

    bool operator==(const Scene&) const = default;
};

inline void validate(const Scene& scene) {
    if (scene.objects.empty() || scene.objects.size() > kMaxObjects)
        throw std::invalid_argument("scene must have 1..5 objects");
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const auto& o = scene.objects[i];
        if (o.count < kMinCount || o.count > kMaxCount)
            throw std::invalid_argument("object count out of range");
        for (size_t j = i + 1; j < scene.objects.size(); ++j) {
            if (scene.objects[j].category == o.category)
                throw std::invalid_argument("duplicate category within scene");
        }
    }
}

inline Scene generate_scene(uint64_t seed) {
    Rng rng = Rng(seed).substream("scene");
    Scene scene;
    scene.seed = seed;
    const int n = 1 + static_cast<int>(rng.uniform_int(kMaxObjects));

    // categories without replacement
    std::array<int, kNumCategories> cats{};
    for (int i = 0; i < kNumCategories; ++i) cats[i] = i;
    for (int i = 0; i < n; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(kNumCategories - i));
        std::swap(cats[i], cats[j]);
    }

    for (int i = 0; i < n; ++i) {
        SceneObject o;
        o.category = static_cast<Category>(cats[i]);
        o.color = static_cast<Color>(rng.uniform_int(kNumColors));
        o.size = static_cast<Size>(rng.uniform_int(kNumSizes));
        o.count = kMinCount + static_cast<int>(rng.uniform_int(kMaxCount - kMinCount + 1));
        o.position = static_cast<Position>(rng.uniform_int(kNumPositions));
        scene.objects.push_back(o);
    }
    validate(scene);
    return scene;
}

inline nlohmann::json to_json(const SceneObject& o) {
    return {{"category", to_string(o.category)},
            {"color", to_string(o.color)},
            {"size", to_string(o.size)},
            {"count", o.count},
            {"position", to_string(o.position)}};
}

inline nlohmann::json to_json(const Scene& s) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : s.objects) objs.push_back(to_json(o));
    return {{"seed", s.seed}, {"objects", objs}};
}

inline SceneObject scene_object_from_json(const nlohmann::json& j) {
    SceneObject o;
    o.category = enum_from_string<Category>(j.at("category"), kNumCategories, "category");
    o.color = enum_from_string<Color>(j.at("color"), kNumColors, "color");
    o.size = enum_from_string<Size>(j.at("size"), kNumSizes, "size");
    o.count = j.at("count").get<int>();
    o.position = enum_from_string<Position>(j.at("position"), kNumPositions, "position");
    return o;
}

inline Scene scene_from_json(const nlohmann::json& j) {
    Scene s;
    s.seed = j.at("seed").get<uint64_t>();
    for (const auto& oj : j.at("objects")) s.objects.push_back(scene_object_from_json(oj));
    validate(s);
    return s;
}

}  // namespace rediff
