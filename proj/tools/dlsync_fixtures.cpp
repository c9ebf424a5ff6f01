// Writes the synthetic fixture tree used by the smoke pipeline.

#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fixture_gen.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate deterministic dlsync fixtures"};
  std::string out;
  app.add_option("--out", out, "Destination directory")->required();
  CLI11_PARSE(app, argc, argv);
  try {
    dlsync::fixtures::write_all(out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
