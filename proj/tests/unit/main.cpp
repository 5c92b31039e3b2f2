#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "higfa/allocator.hpp"

int main(int argc, char** argv) {
  higfa::configure_allocator();
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
