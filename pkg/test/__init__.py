# Test suite for the bilevel fine-tuning lab.
