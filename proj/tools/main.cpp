#include "objsdf/cli/cli.h"

int main(int argc, char** argv) { return objsdf::cli::main(argc, argv); }
