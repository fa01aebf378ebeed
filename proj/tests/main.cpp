#include "neuroflip/runtime.hpp"

#include <catch_amalgamated.hpp>

int main(int argc, char** argv) {
  neuroflip::tune_allocator();
  return Catch::Session().run(argc, argv);
}
