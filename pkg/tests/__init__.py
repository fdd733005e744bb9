"""Test suite for the PINN pipeline"""
