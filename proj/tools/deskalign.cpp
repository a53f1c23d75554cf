#include "deskalign/pipeline.hpp"

int main(int argc, char** argv) { return deskalign::pipeline::run(argc, argv); }
