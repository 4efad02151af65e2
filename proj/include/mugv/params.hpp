#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mugv/tensor.hpp"

namespace mugv {

// On-disk element type. In memory everything is real (double); f32 storage
// rounds values on save and widens them back on load.
enum class Dtype { f32, f64 };

size_t dtype_size(Dtype d);
const char* dtype_name(Dtype d);
Dtype dtype_from(const std::string& name);

struct Param {
    Tensor value;
    Dtype dtype = Dtype::f64;
};

// Named-tensor container: the unit of checkpointing, merging, and expansion.
// Entries are kept sorted by name so every traversal (serialization, parameter
// counting, optimizer steps) is deterministic.
class ParameterSet {
public:
    using Map = std::map<std::string, Param>;

    std::map<std::string, std::string> metadata;

    bool has(const std::string& name) const { return map_.count(name) != 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    Param& entry(const std::string& name);
    void set(std::string name, Tensor value, Dtype dtype = Dtype::f64);
    void erase(const std::string& name) { map_.erase(name); }

    Map& entries() { return map_; }
    const Map& entries() const { return map_; }
    size_t size() const { return map_.size(); }

    int64_t total_elements() const;
    // Elements of every tensor whose name starts with prefix.
    int64_t total_elements(const std::string& prefix) const;
    std::vector<std::string> names() const;

private:
    Map map_;
};

// Container layout: 8-byte magic "MUGVCKPT", little-endian u64 header length,
// UTF-8 JSON header mapping tensor name -> {dtype, shape, offset, length}
// (offsets relative to the payload that follows the header), then the raw
// little-endian tensor payloads, packed contiguously in name order. The key
// "__meta__" is reserved for the string metadata map.
void save_checkpoint(const ParameterSet& params, const std::string& path);
ParameterSet load_checkpoint(const std::string& path);

}  // namespace mugv
