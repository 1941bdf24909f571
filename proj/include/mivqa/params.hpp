#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mivqa/autodiff.hpp"
#include "mivqa/error.hpp"
#include "mivqa/rng.hpp"

namespace mivqa {

/// Index of a tensor inside a ParameterSet.
struct ParamId {
  int index = -1;
};

enum class Init { Zeros, Ones, Xavier };

/// Ordered, named collection of trainable tensors with gradient accumulators.
template <typename T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    ag::Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
  };

  ParamId add(std::string name, ag::Shape shape, Init init, Rng& rng) {
    Entry e;
    e.name = std::move(name);
    e.shape = std::move(shape);
    const std::size_t n = ag::numel(e.shape);
    e.value.assign(n, T(0));
    e.grad.assign(n, T(0));
    if (init == Init::Ones) {
      std::fill(e.value.begin(), e.value.end(), T(1));
    } else if (init == Init::Xavier) {
      const int fan_out = e.shape.back();
      const int fan_in = static_cast<int>(n / static_cast<std::size_t>(fan_out));
      const double sd = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
      for (auto& x : e.value) x = static_cast<T>(sd * rng.normal());
    }
    entries_.push_back(std::move(e));
    return ParamId{static_cast<int>(entries_.size()) - 1};
  }

  /// Binds a parameter as a graph leaf. Gradients go to this set when the
  /// graph records.
  ag::Var use(ag::Graph<T>& g, ParamId id) {
    auto& e = entries_.at(static_cast<std::size_t>(id.index));
    return g.leaf(e.shape, e.value, g.recording() ? e.grad.data() : nullptr);
  }

  void zero_grad() {
    for (auto& e : entries_) std::fill(e.grad.begin(), e.grad.end(), T(0));
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  Entry& operator[](ParamId id) { return entries_.at(static_cast<std::size_t>(id.index)); }
  const Entry& operator[](ParamId id) const { return entries_.at(static_cast<std::size_t>(id.index)); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  // Binary layout, little-endian hosts assumed:
  //   "MIVQAPRM" u32 version u32 count
  //   per tensor: u32 name_len, name bytes, u32 rank, i32 dims[rank], f64 data[numel]
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), Errc::Io, "cannot write " + path);
    out.write("MIVQAPRM", 8);
    write_u32(out, 1);
    write_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      write_u32(out, static_cast<std::uint32_t>(e.name.size()));
      out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
      write_u32(out, static_cast<std::uint32_t>(e.shape.size()));
      for (int d : e.shape) out.write(reinterpret_cast<const char*>(&d), sizeof(d));
      for (T x : e.value) {
        const double v = static_cast<double>(x);
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
    }
    require(static_cast<bool>(out), Errc::Io, "write failed for " + path);
  }

  /// Loads values into an identically laid-out set (same names and shapes).
  void load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), Errc::Io, "cannot read " + path);
    char magic[8];
    in.read(magic, 8);
    require(in && std::memcmp(magic, "MIVQAPRM", 8) == 0, Errc::Io, path + " is not a parameter file");
    require(read_u32(in) == 1, Errc::Io, path + ": unsupported parameter file version");
    const std::uint32_t count = read_u32(in);
    require(count == entries_.size(), Errc::ShapeMismatch,
            path + ": holds " + std::to_string(count) + " tensors, model expects " + std::to_string(entries_.size()));
    for (auto& e : entries_) {
      std::string name(read_u32(in), '\0');
      in.read(name.data(), static_cast<std::streamsize>(name.size()));
      ag::Shape shape(read_u32(in));
      for (auto& d : shape) in.read(reinterpret_cast<char*>(&d), sizeof(d));
      require(in && name == e.name && shape == e.shape, Errc::ShapeMismatch,
              path + ": tensor " + name + ag::shape_str(shape) + " does not match " + e.name + ag::shape_str(e.shape));
      for (auto& x : e.value) {
        double v;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        x = static_cast<T>(v);
      }
      require(static_cast<bool>(in), Errc::Io, path + ": truncated");
    }
  }

 private:
  static void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); }
  static std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
  }

  std::vector<Entry> entries_;
};

/// Adaptive moment estimation over every tensor of a ParameterSet.
template <typename T>
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(const ParameterSet<T>& params, Options opt) : opt_(opt) {
    for (const auto& e : params) {
      m_.emplace_back(e.value.size(), T(0));
      v_.emplace_back(e.value.size(), T(0));
    }
  }

  /// Applies grad * grad_scale, then leaves gradients untouched.
  void step(ParameterSet<T>& params, double grad_scale = 1.0) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& e = params[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < e.value.size(); ++j) {
        const double gj = static_cast<double>(e.grad[j]) * grad_scale;
        m[j] = static_cast<T>(opt_.beta1 * m[j] + (1.0 - opt_.beta1) * gj);
        v[j] = static_cast<T>(opt_.beta2 * v[j] + (1.0 - opt_.beta2) * gj * gj);
        const double mh = m[j] / c1;
        const double vh = v[j] / c2;
        e.value[j] -= static_cast<T>(opt_.learning_rate * mh / (std::sqrt(vh) + opt_.eps));
      }
    }
  }

  long steps() const { return t_; }

 private:
  Options opt_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  long t_ = 0;
};

}  // namespace mivqa
